"""Fine-tuned QA accuracy per PI mode, one row per seed, plus seed means."""
import numpy as np
from _common import desk_from, parser, write

from pilab.experiments import DeskConfig, run_downstream

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    desk = desk_from(args, DeskConfig.downstream_preset())
    reports = run_downstream(desk, args.seeds)
    write(reports, args.out, "downstream", args.format)
    by_mode = {}
    for r in reports:
        by_mode.setdefault(r.pi_mode, []).append(r.top1)
    print("\nmean top-1 over seeds")
    for mode, vals in by_mode.items():
        print(f"  {mode:7s} {100 * np.mean(vals):5.1f}")
