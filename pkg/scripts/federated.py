"""Federated (FedAvg) accuracy against centralized training with the same epoch budget."""

from _common import emit, parser

from fsformer.experiments import federated_gap

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--rounds", type=int, default=20)
    args = p.parse_args()
    emit(federated_gap(args.seed, args.clients, args.rounds), args.out)
