"""Smoke test for the `caat` extension module.

Build it first (see README), then run `python3 python/smoke_test.py`.
"""

import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import caat  # noqa: E402


def blobs(n, d, rng):
    xs, ys = [], []
    for i in range(n):
        y = 1 if i % 2 else -1
        centre = 0.7 if y > 0 else 0.3
        xs.append([min(1.0, max(0.0, rng.gauss(centre, 0.08))) for _ in range(d)])
        ys.append(y)
    return xs, ys


def check_surgery():
    g_c = [1.0, 0.0, 0.0]
    g_a = [0.0, 1.0, 0.0]
    assert abs(caat.cosine_similarity(g_c, g_a)) < 1e-12
    c = caat.conflict_mu(g_c, g_a)
    assert abs(c["mu"] - 1.0) < 1e-12, c
    assert caat.combine_vanilla(g_c, g_a, 0.25) == [0.75, 0.25, 0.0]
    g, report = caat.project_conflict_aware(g_c, g_a, 0.8)
    cos = caat.cosine_similarity(g, g_c)
    assert report["branch"] == "projected", report
    assert abs(cos - 0.8) < 1e-9, cos
    c = report["lambda_star"]
    assert max(abs(p - q) for p, q in zip(g, [c, 1.0, 0.0])) < 1e-12, (g, c)
    _, report = caat.project_conflict_aware(g_c, [2.0, 0.0, 0.0], 0.8)
    assert report["branch"] == "standard_only", report
    p, v = caat.sgd_step([1.0, 1.0], [0.0, 0.0], [0.5, -0.5], 0.1, 0.9)
    assert p == [0.95, 1.05] and v == [0.5, -0.5], (p, v)


def check_errors():
    try:
        caat.project_conflict_aware([1.0], [1.0, 2.0], 0.5)
    except caat.ValidationError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")
    try:
        caat.Attack(delta=-1)
    except ValueError:
        pass
    else:
        raise AssertionError("negative budget accepted")


def check_model_and_bound():
    lam, res = caat.power_iteration_lmax([[2.0, 0.0], [0.0, 5.0]])
    assert abs(lam - 5.0) < 1e-9 and res < 1e-8 * lam, (lam, res)

    rng = random.Random(0)
    x, y = blobs(80, 4, rng)
    model = caat.Model.logistic(4, seed=1)
    attack = caat.Attack(attack="analytic_linear", delta=0.1, clip=False)
    trained, records = caat.train(
        model, x, y, x, y,
        method="ca_at", gamma=0.8, loss="bce", attack="analytic_linear",
        delta=0.1, clip=False, epochs=30, batch_size=16, lr_max=0.5,
    )
    assert len(records) == 30
    assert records[-1]["std_acc"] > 0.9, records[-1]
    preds = trained.predict(x)
    assert sum(p == t for p, t in zip(preds, y)) / len(y) == records[-1]["std_acc"]

    adv = caat.perturb(trained, x[:4], y[:4], attack)
    for a, b in zip(adv, x[:4]):
        assert max(abs(p - q) for p, q in zip(a, b)) <= 0.1 + 1e-12

    report = caat.verify_bound(trained, x[0], y[0], attack, loss="bce")
    assert report["mu_observed"] >= 0 and report["mu_bound"] >= 0, report

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        trained.save(path)
        back = caat.Model.load(path)
        assert back.params() == trained.params()
        assert back.dims == trained.dims


def check_commands():
    defaults = caat.defaults("train")
    assert defaults["gamma"] == "0.8", defaults["gamma"]
    with tempfile.TemporaryDirectory() as tmp:
        manifest = caat.run(
            "train", out=tmp, task="blobs", model="mlp", hidden=6,
            loss="bce", attack="fgsm", delta=0.05, epochs=2, batch_size=16,
        )
        assert len(manifest["run_id"]) == 16, manifest["run_id"]
        assert os.path.exists(os.path.join(tmp, "metrics.csv"))


def main():
    check_surgery()
    check_errors()
    check_model_and_bound()
    check_commands()
    print("python smoke test ok")


if __name__ == "__main__":
    main()
