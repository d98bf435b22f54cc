"""Time one encoder pass under each normalisation and activation choice.

Every variant performs the same matrix products, so differences come from the
element-wise ops alone.
"""

import sys

from mobilebert_kit.config import preset
from mobilebert_kit.efficiency import bench_op_variants


def main():
    name = sys.argv[1] if len(sys.argv) > 1 else "desk_student"
    rep = bench_op_variants(preset(name), T=128, repeats=30)
    for row in rep.rows:
        print(f"{row.variant:<18} median {row.median_s * 1e3:8.2f} ms  (p10 {row.p10_s * 1e3:.2f}, "
              f"p90 {row.p90_s * 1e3:.2f})")
    print("expected ordering holds:", rep.ordering_holds())


if __name__ == "__main__":
    main()
