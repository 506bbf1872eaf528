"""Private federated training across noise multipliers, with the accounted budget."""

from _common import emit, parser

from fsformer.experiments import dp_sweep

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--sigmas", default="0.001,0.1,0.5")
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--clip", type=float, default=1.0)
    args = p.parse_args()
    sigmas = [float(s) for s in args.sigmas.split(",")]
    emit(dp_sweep(sigmas, args.seed, rounds=args.rounds, clip_norm=args.clip), args.out)
