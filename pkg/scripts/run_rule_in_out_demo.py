#!/usr/bin/env python3
"""Skin-type demo: rule-in / rule-out accuracy per subgroup.

Generates the 7-group, 3-class scenario (malignant class critical), fits the
five set methods at one miscoverage level, and prints per-group rule-in
(critical cases: true class captured) and rule-out (non-critical cases: no
critical class in the set) accuracies plus set sizes.
"""
import argparse

from conformal_audit.calibration import fit_aggregate, fit_group, naive_predictor
from conformal_audit.data import SplitSpec, split_calibration_test
from conformal_audit.metrics import audit_predictor
from conformal_audit.scoring import ScoreMethod
from conformal_audit.synth import fitzpatrick_config, generate

METHODS = ("naive", "aps", "raps", "gaps", "graps")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--n-per-group", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    table = generate(fitzpatrick_config(args.n_per_group, seed=args.seed))
    cal, test = split_calibration_test(table, SplitSpec(0.5, seed=args.seed))

    print(f"alpha={args.alpha}, n_cal={len(cal)}, n_test={len(test)}, "
          f"critical classes={sorted(table.critical_classes)}")
    for method in METHODS:
        if method == "naive":
            pred = naive_predictor(args.alpha)
        else:
            score = ScoreMethod.raps() if method in ("raps", "graps") else ScoreMethod.aps()
            fitter = fit_group if method in ("gaps", "graps") else fit_aggregate
            pred = fitter(cal, args.alpha, score)
        row = audit_predictor(pred, test)
        print(f"\n--- {method} (coverage {row.aggregate_coverage:.3f}, "
              f"mean size {row.aggregate_set_size:.2f}) ---")
        print(f"{'group':>8} {'rule-in':>8} {'rule-out':>9} {'coverage':>9} {'size':>6}")
        for g in test.groups:
            rin = row.rule_in[g]
            rout = row.rule_out[g]
            print(f"{g:>8} "
                  f"{'--' if rin is None else f'{rin:.3f}':>8} "
                  f"{'--' if rout is None else f'{rout:.3f}':>9} "
                  f"{row.group_coverage[g]:>9.3f} {row.group_set_size[g]:>6.2f}")


if __name__ == "__main__":
    main()
