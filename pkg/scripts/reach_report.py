"""Print a per-step summary of a reach run: time span, tags, p1 clusters and (p1, v1) volume."""

import argparse
import json
from pathlib import Path

from hierreach.reach import branch_clusters, load_reach


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="directory holding reach.csv and reach_meta.json")
    ap.add_argument("--dim", type=int, default=0, help="state dimension used for clustering")
    args = ap.parse_args(argv)

    meta = json.loads((args.run_dir / "reach_meta.json").read_text())
    rs = load_reach(args.run_dir / "reach.csv")
    print(f"verdict {meta['verdict']}, {len(meta.get('refinement_events', []))} refinement events, "
          f"{meta['wall_time']:.1f}s")
    print("step   t_lo   t_hi  boxes  clusters  volume(p1,v1)  tags")
    for k in rs.steps:
        segs = rs.at_step(k)
        t_lo = min(s.t_lo for s in segs)
        t_hi = max(s.t_hi for s in segs)
        tags = sorted({s.planner_tag for s in segs})
        clusters = len(branch_clusters(rs, k, args.dim))
        print(f"{k:4d} {t_lo:6.2f} {t_hi:6.2f} {len(segs):6d} {clusters:9d} {rs.union_volume(k, [0, 1]):14.4g}  "
              f"{','.join(tags)}")


if __name__ == "__main__":
    main()
