"""Unseen-attack pipeline: known-class classifier, GAN on a held-out family, threshold sweep."""

import numpy as np
from _common import emit, parser

from fsformer.experiments import unseen_pipeline
from fsformer.histgan import detect_unseen

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--classifier-epochs", type=int, default=30)
    p.add_argument("--gan-epochs", type=int, default=50)
    args = p.parse_args()
    res = unseen_pipeline(args.seed, args.classifier_epochs, args.gan_epochs)
    sweep = []
    for tau in np.round(np.arange(0.1, 1.0, 0.1), 2):
        sweep.append({
            "threshold": float(tau),
            "detection_rate": detect_unseen(res["weights"], res["fake"], tau)[1],
            "false_flag_rate": detect_unseen(res["weights"], res["known_test"], tau)[1],
        })
    out = {k: v for k, v in res.items() if k not in ("weights", "fake", "known_test")}
    out["sweep"] = sweep
    emit(out, args.out)
