"""Single-sequence latency of the full-size classifier on one CPU thread."""

import numpy as np
import torch
from _common import emit, parser

from fsformer import model as nn
from fsformer.bench import bench_inference

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--warmup", type=int, default=50)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = nn.ModelConfig()
    samples = np.random.default_rng(args.seed).normal(size=(64, cfg.timesteps, cfg.features))
    report = bench_inference(nn.init_weights(cfg, args.seed), samples, warmup=args.warmup, iterations=args.iterations)
    emit({"params": nn.param_count(cfg), **report.summary()}, args.out)
