"""Mutual position accuracies for both pre-training variants and all PI modes."""
from _common import desk_from, parser, write

from pilab.experiments import DeskConfig, run_probe

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    desk = desk_from(args, DeskConfig.probe_preset())
    write(run_probe(desk, args.seed), args.out, "probe", args.format)
