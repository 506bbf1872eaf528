"""Desk-scale 20-class centralized training on the synthetic corpus."""

from dataclasses import replace

from _common import emit, parser

from fsformer.experiments import DESK_TRAIN, centralized_run

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--epochs", type=int, default=DESK_TRAIN.epochs)
    args = p.parse_args()

    def log(e):
        print(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  val acc {e.metrics.accuracy:.4f}", flush=True)

    res = centralized_run(args.seed, replace(DESK_TRAIN, epochs=args.epochs), on_epoch=log)
    test = res["test"]
    emit({
        "test_accuracy": test.accuracy,
        "test_macro_f1": test.f1,
        "distinct_class_accuracy": res["distinct_accuracy"],
        "per_class_recall": test.class_recall.tolist(),
        "seconds": res["seconds"],
    }, args.out)
