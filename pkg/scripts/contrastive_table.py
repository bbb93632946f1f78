"""Recall on the random-swap and antonym challenge sets, plain vs PIP + CL."""
from _common import desk_from, parser, write

from pilab.experiments import DeskConfig, run_contrastive

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--pi-mode", default="bbox_d", choices=["none", "xy", "bbox", "bbox_d"])
    args = p.parse_args()
    desk = desk_from(args, DeskConfig.contrastive_preset())
    write(run_contrastive(desk, args.seed, args.pi_mode), args.out, "contrastive", args.format)
