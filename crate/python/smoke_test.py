#!/usr/bin/env python3
"""Smoke test for the simulmt_py extension module.

Builds nothing itself: run `cargo build --release -p simulmt-py` first.
The script locates the compiled cdylib, exposes it under the importable
name, and exercises the main surfaces end to end.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path


def import_simulmt_py():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libsimulmt_py.so",
        root / "target" / "debug" / "libsimulmt_py.so",
        root / "target" / "release" / "libsimulmt_py.dylib",
        root / "target" / "debug" / "libsimulmt_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build --release -p simulmt-py")
    stage = Path(tempfile.mkdtemp(prefix="simulmt_py_"))
    suffix = ".so" if built.suffix == ".so" else ".so"
    shutil.copy2(built, stage / f"simulmt_py{suffix}")
    sys.path.insert(0, str(stage))
    import simulmt_py

    return simulmt_py


def main():
    smt = import_simulmt_py()

    # alignment: the three routes agree and conserve probability mass
    p = [[0.5, 0.5], [0.5, 0.5]]
    alpha_par, resid_par = smt.alignment_parallel(p)
    alpha_rec, resid_rec = smt.alignment_recurrent(p)
    alpha_bf, resid_bf = smt.alignment_brute_force(p)
    for a, b in zip(alpha_par, alpha_rec):
        assert all(abs(x - y) < 1e-8 for x, y in zip(a, b))
    for a, b in zip(alpha_rec, alpha_bf):
        assert all(abs(x - y) < 1e-10 for x, y in zip(a, b))
    for row, r in zip(alpha_par, resid_par):
        assert abs(sum(row) + r - 1.0) < 1e-9
    assert abs(alpha_bf[0][0] - 0.5) < 1e-12 and abs(alpha_bf[0][1] - 0.25) < 1e-12
    path = smt.sample_alignment(p, seed=7)
    assert path == sorted(path), "sampled paths are monotone"
    print("alignment routes agree; mass conserved")

    # energies and the write gate
    assert abs(smt.modulate_energy(1.3, -1.3) - 0.5) < 1e-12
    assert smt.write_gate([0.9, 0.8], threshold=0.5)
    assert not smt.write_gate([0.9, 0.4], threshold=0.5)
    print("modulation and slowest-head gate behave")

    # metrics: wait-k identity and quality extremes
    for k in (1, 2, 3):
        delays = [min(k + i, 6) for i in range(6)]
        assert smt.average_lagging(delays, 6.0, 6.0) == float(k)
    ref = ["a", "b", "c", "d", "e"]
    assert smt.sentence_quality(ref, ref) == 100.0
    assert smt.sentence_quality(["x", "y", "z", "w", "v"], ref) == 0.0
    print("average lagging and quality score check out")

    # language model on a generated anticipatable task
    data = smt.generate_task("bigram_grammar", vocab_size=16, n=300, seed=3,
                             determinism=1.0, len_min=5, len_max=8)
    targets = [t for _, t in data]
    lm = smt.NGramLM(targets, order=2)
    dist = lm.next_distribution(targets[0][:1])
    assert abs(sum(dist) - 1.0) < 1e-9 and all(q > 0 for q in dist)
    hits = sum(lm.predict_next(t[:i]) == t[i]
               for t in targets[:50] for i in range(1, len(t)))
    total = sum(len(t) - 1 for t in targets[:50])
    assert hits == total, "fully deterministic grammar must be fully predictable"
    assert lm.perplexity(targets[0]) >= 1.0
    print(f"n-gram LM: {hits}/{total} next-token predictions correct")

    # a tiny end-to-end train + simultaneous decode
    train, _, test = smt.split_dataset(data, ratios=(0.8, 0.1, 0.1), seed=3)
    model = smt.SimulModel(train, future_info=True, lambda_=0.1, epochs=3, seed=1)
    src, tgt = test[0]
    hyp, delays = model.translate(src)
    assert len(delays) == len(hyp)
    assert all(d2 >= d1 for d1, d2 in zip(delays, delays[1:])), "delays never decrease"
    al, quality = model.evaluate(test[:40])
    hyp_k, delays_k = model.translate_wait_k(src, k=2)
    assert delays_k == [min(2.0 + i, float(len(src))) for i in range(len(hyp_k))]
    print(f"simultaneous decode: AL {al:.2f} units, quality {quality:.1f}")
    assert math.isfinite(al) and 0.0 <= quality <= 100.0

    print("smoke test passed")


if __name__ == "__main__":
    main()
