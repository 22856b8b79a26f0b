"""Train HIDRA on N in [2,6] plus per-N MAML baselines and evaluate on N = 2..10.

    python3 scripts/desk_sweep.py --out runs/desk_sweep [--iterations 2000] [--tasks 500]
"""
import argparse
from dataclasses import replace

from hidra.experiments import DeskConfig, run_desk_sweep, run_redundancy_probe


def log(msg):
    print(msg, flush=True)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/desk_sweep")
    p.add_argument("--iterations", type=int, default=DeskConfig.iterations)
    p.add_argument("--tasks", type=int, default=DeskConfig.eval_tasks)
    p.add_argument("--cluster-std", type=float, default=DeskConfig.cluster_std)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-probe", action="store_true", help="skip the neuron-copy probe on the 5-way MAML head")
    a = p.parse_args()
    cfg = replace(DeskConfig(), iterations=a.iterations, eval_tasks=a.tasks, cluster_std=a.cluster_std,
                  threads=a.threads)
    sweep = run_desk_sweep(cfg, a.out, log=log)
    print(f"{'N':>3} {'chance':>7} {'hidra':>7} {'maml':>7} {'gap':>7}")
    for c in sweep.comparisons():
        maml = f"{c.maml_acc:7.4f}" if c.maml_acc is not None else "      -"
        gap = f"{c.gap:+7.4f}" if c.gap is not None else "      -"
        print(f"{c.N:>3} {c.chance:7.4f} {c.hidra_acc:7.4f} {maml} {gap}")
    print(f"total {sweep.seconds:.0f}s")
    if not a.no_probe and f"maml{cfg.probe_way}" in sweep.models:
        run_redundancy_probe(cfg, sweep.models[f"maml{cfg.probe_way}"], a.out, log=log)


if __name__ == "__main__":
    main()
