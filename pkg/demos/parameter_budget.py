"""Walk through where the parameters of the large and compact encoders live."""

from mobilebert_kit.config import TABLE1_PARAMS, TABLE2_ROWS, count_params, preset
from mobilebert_kit.efficiency import estimate_flops


def main():
    for name, reported in TABLE1_PARAMS.items():
        rep = count_params(preset(name))
        print(f"{name:<16} backbone {rep.backbone / 1e6:7.2f}M  reported {reported / 1e6:6.1f}M  "
              f"MHA:FFN {rep.mha_ffn_ratio()}  FLOPs@128 {estimate_flops(preset(name)) / 1e9:5.2f}B")

    print("\nshrinking the inter-block width of the inverted-bottleneck teacher")
    for row, (inter, intra, heads, reported) in TABLE2_ROWS.items():
        got = count_params(preset(f"table2_{row}")).backbone
        print(f"  ({row}) inter {inter:4d} intra {intra:4d} heads {heads:2d}: {got / 1e6:6.1f}M vs {reported / 1e6:.0f}M")

    print("\nper-layer breakdown of the compact student")
    print(count_params(preset("mobilebert")).table())


if __name__ == "__main__":
    main()
