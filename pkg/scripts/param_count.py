"""Network size table: weights+biases and trainable slopes per architecture."""
import argparse

from pinndic.network import param_count, weight_bias_count


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--width", type=int, default=50)
    ap.add_argument("--max-layers", type=int, default=6)
    args = ap.parse_args()
    print("hidden_layers,hidden_width,weights_biases,slopes,total")
    for h in range(1, args.max_layers + 1):
        wb = weight_bias_count(h, args.width)
        total = param_count(h, args.width)
        print(f"{h},{args.width},{wb},{total - wb},{total}")


if __name__ == "__main__":
    main()
