"""Exercise the Python bindings end to end on a tiny model.

Build and install first:
    pip install maturin
    maturin build -m crates/py/Cargo.toml --release -o dist
    pip install dist/normmatch_py-*.whl
"""

import json
import math
import os
import tempfile

import normmatch_py as nm

SPEC = "num_pairs = 24\nm_min = 3\nm_max = 6\nlatent_dim = 8\nsignal_dims = 4\n"
CONFIG = "d_model = 16\nheads = 2\ngnn_input_dim = 8\nc_last = 4\nbatch_size = 4\nepochs = 2\n"


def check_matching_ops():
    s = 0.5 * math.sqrt(3.0)
    f = [[1.0, 0.0], [-0.5, s], [-0.5, -s]]
    c = nm.affinity(f, f)
    assert all(abs(c[i][i] - 1.0) < 1e-12 for i in range(3))
    plan, err = nm.sinkhorn(c, temperature=0.1, iters=30)
    assert err < 1e-6, err
    assignment, non_injective = nm.decode_matching(plan)
    assert assignment == [0, 1, 2] and not non_injective
    assert nm.decode_matching([[0.5, 0.5], [0.5, 0.5]]) == ([0, 0], True)
    try:
        nm.sinkhorn([[1.0, 2.0]])
    except ValueError as e:
        assert "square" in str(e)
    else:
        raise AssertionError("non-square affinity accepted")


def check_gradients():
    for module in ("gnn", "transformer", "losses"):
        results = nm.gradcheck(module, instances=2)
        assert all(ok for ok, _ in results), (module, results)


def check_training_round_trip(tmp):
    train, val = os.path.join(tmp, "train.jsonl"), os.path.join(tmp, "val.jsonl")
    for path, seed in ((train, 1), (val, 2)):
        with open(path, "w") as f:
            f.write("\n".join(nm.generate_pairs(seed, SPEC)) + "\n")

    m = nm.Matcher(CONFIG)
    assert m.epoch == 0
    metrics = m.train(train, val)
    assert [r["epoch"] for r in metrics] == [1, 2]
    assert metrics[0]["lr"] == 5e-4
    assert m.epoch == 2

    with open(val) as f:
        pairs = [line for line in f if line.strip()]
    mean, classes = m.evaluate(pairs)
    assert 0.0 <= mean <= 1.0
    assert abs(mean - sum(a for _, _, a in classes) / len(classes)) < 1e-12

    ck = os.path.join(tmp, "model.nmtc")
    m.save(ck)
    loaded = nm.Matcher.load(ck)
    assert loaded.epoch == 2
    assert loaded.config() == m.config()
    a = loaded.match_pair(pairs[0])
    b = nm.Matcher.load(ck).match_pair(pairs[0])
    assert a["assignment"] == b["assignment"] and a["plan"] == b["plan"]
    n = len(json.loads(pairs[0])["truth"])
    assert len(a["plan"]) == n and len(a["scores"]) == n
    assert a["marginal_error"] < 1e-2
    return mean


def main():
    check_matching_ops()
    check_gradients()
    with tempfile.TemporaryDirectory() as tmp:
        mean = check_training_round_trip(tmp)
    print(f"smoke test ok (tiny model held-out accuracy {mean:.3f})")


if __name__ == "__main__":
    main()
