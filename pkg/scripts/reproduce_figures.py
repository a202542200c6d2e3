"""Learning-rate sweep for the MAE and Matthew-degree comparison.

Runs every configured algorithm over the gamma grid, writes sweep.csv and
sweep_summary.json, and prints both curves as tables.

    python scripts/reproduce_figures.py configs/synthetic.toml
    python scripts/reproduce_figures.py configs/comoda.toml --out out/figs
"""
import argparse
import math
from dataclasses import replace
from pathlib import Path

from powermat.harness import DEFAULT_SWEEP, load_config, run_sweep


def table(rows, metric, gammas, algorithms):
    head = f"{'gamma':>10} " + " ".join(f"{a:>12}" for a in algorithms)
    lines = [head]
    for g in gammas:
        cells = []
        for a in algorithms:
            r = next(r for r in rows if r["algorithm"] == a and r["gamma"] == g)
            v = r[metric]
            cells.append(f"{'diverged':>12}" if r["diverged"] else
                         f"{'n/a':>12}" if not math.isfinite(v) else f"{v:12.4f}")
        lines.append(f"{g:10.2e} " + " ".join(cells))
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config", type=Path)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if cfg.sweep is None:
        cfg = replace(cfg, sweep=DEFAULT_SWEEP)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    result = run_sweep(cfg)
    algorithms = [a.value for a in cfg.algorithms]
    print("MAE (lower is better)")
    print(table(result.rows, "mae", cfg.sweep, algorithms))
    print("\nDegree of Matthew effect (slope difference; closer to 0 is fairer)")
    print(table(result.rows, "matthew_degree", cfg.sweep, algorithms))
    print("\nbest gamma per algorithm:")
    for a, row in result.best().items():
        print(f"  {a:12s} gamma={row['gamma']:.2e} mae={row['mae']:.4f}")
    print(f"\nwrote {cfg.out_dir / 'sweep.csv'}")


if __name__ == "__main__":
    main()
