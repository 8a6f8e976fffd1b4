"""Smoke test for the seroifr extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/seroifr-*.whl
"""

import math
import random
import sys
import tempfile

import seroifr


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    template = seroifr.Dataset.template(n_locations=3)
    check(len(template) == 3, "template has three locations")

    base = seroifr.Model(template)
    truth = base.reference_truth()
    data = base.simulate(truth, seed=7)
    check(sum(r[3] for r in data.serology(0)) > 0, "simulation produced positives")

    with tempfile.TemporaryDirectory() as d:
        data.write(d)
        reloaded = seroifr.Dataset.load(d)
        check(reloaded.location_ids == data.location_ids, "dataset round trip")

    model = seroifr.Model(data, spec={"mesh_step": 0.25})
    u = model.unconstrain(truth)
    check(len(u) == model.dim, "unconstrained length matches dim")
    lp, grad = model.log_posterior(u)
    check(math.isfinite(lp), f"log posterior finite at truth ({lp:.3f})")

    h = 1e-5
    for k in random.Random(1).sample(range(model.dim), 5):
        up, dn = list(u), list(u)
        up[k] += h
        dn[k] -= h
        fd = (model.log_posterior(up)[0] - model.log_posterior(dn)[0]) / (2 * h)
        check(abs(fd - grad[k]) <= 1e-5 * max(1.0, abs(fd)), f"gradient of {model.coordinate_names[k]}")

    back = model.constrain(u)
    check(abs(back["sens"][0] - truth["sens"][0]) < 1e-12, "constrain inverts unconstrain")

    draws = model.sample(seed=3, chains=2, warmup=400, samples=150)
    check(draws.n_chains == 2 and draws.n_samples == 150, "draw shape")
    passed, rows = draws.diagnostics()
    check(len(rows) == len(model.parameter_names), "one diagnostic row per parameter")

    curve = draws.curve(model, 0, "ifr")
    check(len(curve["age"]) == 101, "IFR curve on ages 0..100")
    check(curve["median"][80] > curve["median"][20], "IFR rises with age")
    mean, median, lo, hi = draws.population_ifr(model, 0)
    check(lo <= median <= hi, "population IFR interval brackets the median")

    p = seroifr.positivity(0.2, 0.9, 0.99)
    check(abs(seroifr.rogan_gladen(p, 0.9, 0.99) - 0.2) < 1e-12, "Rogan-Gladen inverts positivity")

    rng = random.Random(5)
    chains = [[rng.gauss(0, 1) for _ in range(1000)] for _ in range(3)]
    check(abs(seroifr.split_rhat(chains) - 1.0) < 0.02, "split R-hat near 1 on iid draws")
    check(2000 < seroifr.ess(chains) < 4500, "ESS near draw count on iid draws")

    try:
        seroifr.rogan_gladen(0.5, 0.4, 0.5)
    except seroifr.SeroifrError:
        check(True, "degenerate test raises SeroifrError")
    else:
        check(False, "degenerate test raises SeroifrError")

    print("all checks passed")


if __name__ == "__main__":
    main()
