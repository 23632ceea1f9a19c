"""Build the synthetic benchmark and train the black-box source model.

Run: python3 demos/01_benchmark_and_source.py
"""
from bbuda.benchgen import BenchmarkSpec, generate, train_source
from bbuda.blackbox import InProcessPredictor, fill_cache
from bbuda.evaluation import GroundTruth, so_plus_plus

spec = BenchmarkSpec()
src, tgt, part = generate(spec)
print(f"classes: {part.n_common} shared, {part.n_source_private} source-only, "
      f"{part.n_target_private} target-only")
print(f"source set {src.inputs.shape}, target set {tgt.inputs.shape}")

# The source model sees labeled source data only.
res = train_source(src, part.k)
print(f"source train accuracy {res.train_accuracy:.3f}")

# Applied to the shifted target domain with the entropy rejection rule,
# the source model alone already gives the SO++ baseline.
cache = fill_cache(InProcessPredictor(res.model), tgt.inputs)
rep = so_plus_plus(cache.outputs, GroundTruth(tgt.labels, part.k))
print(f"SO++ on target: H={rep.h_score:.3f} acc_in={rep.acc_in:.3f} acc_out={rep.acc_out:.3f}")
