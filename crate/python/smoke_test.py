"""Smoke test for the rgia Python module.

Build first with `cargo build --release -p rgia-py`, then run
`python3 python/smoke_test.py`. Set RGIA_LIB to use another build.
"""

import importlib.util
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    lib = os.environ.get("RGIA_LIB", os.path.join(ROOT, "target", "release", "librgia.so"))
    if not os.path.exists(lib):
        sys.exit(f"missing {lib}; run `cargo build --release -p rgia-py`")
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "rgia.so")
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("rgia", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    rgia = load()
    print("rgia", rgia.__version__)

    env = rgia.Env.gridlake()
    assert env.kind == "gridlake" and env.state_dim == 16
    assert rgia.Env.from_json(env.to_json()).state_dim == 16

    sc = rgia.Scenario(
        env,
        seed=1,
        scenario=json.dumps({"dataset_size": 300, "packet_round": 3, "packets": 2}),
        federation=json.dumps({"local_batch_size": 1}),
    )
    assert sc.n_packets == 2 and sc.batch_size == 1
    truth = sc.truth(0)
    assert len(truth) == 1 and len(truth[0]["s"]) == 16

    gia = json.dumps({"weights": {"alpha": 0, "beta": 0, "gamma_dyn": 0, "lambda": 1},
                      "max_iterations": 200})
    rec = sc.attack(0, config=gia, seed=7)
    again = sc.attack(0, config=gia, seed=7)
    assert rec.relaxed == again.relaxed
    assert len(rec.loss_trace) == rec.iterations == 200
    score = rec.score()
    print("gia on packet 0:", {k: round(v, 4) for k, v in score.items()})

    noisy = sc.attack(0, config=gia, seed=7,
                      defense=json.dumps({"kind": "gaussian", "variance": 1e-3, "seed": 0}))
    assert noisy.relaxed != rec.relaxed

    assert rgia.mse([0.0, 0.0], [1.0, 1.0]) == 1.0
    q = rgia.quantize([0.0, 0.3, 1.0], 4)
    assert q[0] == 0.0 and q[2] == 1.0 and abs(q[1] - 0.3) <= 1.0 / 30
    assert rgia.reg_reward(0.5, 0.0, 1.0) == 0.0
    assert rgia.reg_reward(2.0, 0.0, 1.0) > 0.0
    assert abs(rgia.ssim([0.5] * 64, [0.5] * 64, 8) - 1.0) < 1e-12
    mean, per = rgia.silhouette([[0, 0], [0, 0.1], [5, 5], [5, 5.1]], [0, 0, 1, 1])
    assert mean > 0.9 and len(per) == 4

    try:
        rgia.Scenario(env, scenario=json.dumps({"packets": 0}))
    except rgia.ConfigError as e:
        print("config error raised:", e)
    else:
        raise AssertionError("expected ConfigError")

    csv, summary = rgia.run_experiment(json.dumps({
        "experiment": "attack",
        "env": {"kind": "pointmass"},
        "seeds": [0],
        "federation": {"n_agents": 3, "rounds": 4, "local_batch_size": 1,
                       "learning_rate": 0.05, "seed": 0},
        "attack": {"max_iterations": 20, "weights": {"alpha": 1, "beta": 1,
                                                      "gamma_dyn": 0, "lambda": 1}},
        "scenario": {"dataset_size": 200, "packet_round": 2},
    }))
    assert csv.splitlines()[0].startswith("experiment,env,arm,seed")
    assert json.loads(summary)["arms"][0]["arm"] == "attack"
    print("smoke test ok")


if __name__ == "__main__":
    main()
