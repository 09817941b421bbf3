"""Comparing two classifiers scored on the same cases.

Draws correlated scores for two models, then reports each AUROC with a
DeLong interval, the DeLong test for the difference, and a bootstrap check
of the same comparison. Pure numpy/scipy, runs in seconds:

    python demos/compare_auc.py
"""

import numpy as np

from swinmae.stats import MetricKind, binary_auroc, bootstrap_compare, delong_test, metric_report


def main(n_pos=60, n_neg=90, seed=7):
    rng = np.random.default_rng(seed)
    labels = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    shared = rng.normal(size=n_pos + n_neg)  # case difficulty seen by both models
    a = 1.2 * labels + shared + 0.6 * rng.normal(size=labels.size)
    b = 0.8 * labels + shared + 0.6 * rng.normal(size=labels.size)

    d = delong_test(a, b, labels)
    for name, auc, ci in (("model A", d.auc_a, d.ci_a), ("model B", d.auc_b, d.ci_b)):
        print(f"{name}: AUROC {auc:.4f}  DeLong 95% CI ({ci[0]:.4f}, {ci[1]:.4f})")
    print(f"DeLong: z={d.comparison.statistic:+.3f} p={d.p_value:.4g} {d.comparison.stars}".rstrip())

    auc = lambda s: lambda idx: binary_auroc(s[idx], labels[idx])  # noqa: E731
    rep = metric_report(MetricKind.AUROC, auc(a), labels.size, n_resamples=2000, seed=0)
    print(f"model A bootstrap CI ({rep.ci_low:.4f}, {rep.ci_high:.4f}) from {rep.n_resamples} resamples")
    boot = bootstrap_compare(auc(a), auc(b), labels.size, n_resamples=2000, seed=0)
    print(f"bootstrap: delta={boot.statistic:+.4f} p={boot.p_value:.4g} {boot.stars}".rstrip())


if __name__ == "__main__":
    main()
