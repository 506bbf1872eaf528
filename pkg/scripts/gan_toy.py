"""GAN on a constant toy distribution; prints the histogram CDF loss per epoch."""

from _common import emit, parser

from fsformer.experiments import gan_toy

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--epochs", type=int, default=50)
    args = p.parse_args()
    hist = gan_toy(args.epochs, args.seed)
    emit({"hist_loss": hist, "ratio_last_to_first": hist[-1] / hist[0]}, args.out)
