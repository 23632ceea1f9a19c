"""Adapt a target model while the source model sits behind an HTTP endpoint.

The adaptation loop only sees probability vectors returned by the server.
Run: python3 demos/02_blackbox_adaptation.py
"""
import logging

from bbuda.benchgen import BenchmarkSpec, generate, train_source
from bbuda.blackbox import RemotePredictor, serve
from bbuda.evaluation import GroundTruth, evaluate, so_plus_plus
from bbuda.trainer import AdaptConfig, adapt, predict

logging.basicConfig(level=logging.WARNING)

src, tgt, part = generate(BenchmarkSpec())
source = train_source(src, part.k).model
truth = GroundTruth(tgt.labels, part.k)

with serve(source) as server:
    print(f"source model served at {server.url}")
    remote = RemotePredictor(server.url)
    result = adapt(tgt.inputs, remote, AdaptConfig(), truth=truth)
    print(f"HTTP predict requests during the whole run: {remote.predict_requests}")

for rec in result.history.records[::20] + result.history.records[-1:]:
    print(f"epoch {rec.epoch:3d} alpha={rec.alpha:.2f} loss={rec.loss_total:.4f} H={rec.h_score:.3f}")

ours = evaluate(predict(result.model, tgt.inputs), truth)
base = so_plus_plus(result.cache.outputs, truth)
print(f"adapted H={ours.h_score:.3f} (AA {ours.aa:.3f}) vs SO++ H={base.h_score:.3f} (AA {base.aa:.3f})")
