"""Smoke test for the compiled extension.

Build with `cargo build --release -p geoextremes-py`, then either install via
maturin or copy `target/release/libgeoextremes.so` next to this file as
`geoextremes.so` (or point GEOEXTREMES_PY_DIR at the directory holding it).
"""

import json
import math
import os
import pathlib
import random
import sys
import tempfile

HERE = pathlib.Path(__file__).resolve().parent
sys.path.insert(0, os.environ.get("GEOEXTREMES_PY_DIR", str(HERE)))

import geoextremes as gx  # noqa: E402


def check_gauge():
    coords = gx.synthetic_coords(4)
    g = gx.Gauge(coords, 0.9, 1.3, 1.4)
    rng = random.Random(1)
    for _ in range(100):
        z = [rng.uniform(0.01, 3.0) for _ in coords]
        c = rng.uniform(0.1, 10.0)
        assert abs(g([c * v for v in z]) - c * g(z)) < 1e-10
    identity = gx.Gauge(coords, 1e-3, 1.0, 2.0)
    assert abs(identity([0.1, 0.2, 0.3, 0.4]) - 1.0) < 1e-12


def check_model():
    coords = gx.synthetic_coords(4)
    m = gx.Model(coords, 0.6, 1.1, 1.4, 1.5, 2.0)
    w = [0.25, 0.25, 0.25, 0.25]
    lower = 2.0 * m.threshold(w)
    draws = m.sample_radius(w, 2.0, 2000, seed=3)
    assert min(draws) > lower
    # empirical conditional survival at 1.5x the truncation point
    ratio = math.exp(m.ln_sf(w, 1.5 * lower) - m.ln_sf(w, lower))
    frac = sum(r > 1.5 * lower for r in draws) / len(draws)
    assert abs(frac - ratio) < 0.05, (frac, ratio)
    assert math.isfinite(m.g(w))


def check_oracle():
    rng = random.Random(2)
    sample = [[rng.expovariate(1.0) for _ in range(3)] for _ in range(2000)]
    q = [0.5, 1.0, 1.5]
    for m in (1, 2):
        a = gx.inclusion_exclusion_oracle(sample, q, m)
        b = gx.direct_count_probability(sample, q, m)
        assert abs(a - b) < 1e-12, (a, b)


def check_fit():
    data = gx.generate_synthetic("meta-gaussian", 4, 4000, seed=5)
    assert data.n_times == 4000 and data.n_sites == 4
    model, info = gx.fit(data, seed=5)
    assert info["n_exceedances"] == 800, info
    assert all(math.isfinite(v) for v in model.params)
    try:
        gx.Model(gx.synthetic_coords(4), -1.0, 1.0, 1.0, 2.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative lambda accepted")
    return data


def check_pipeline(data):
    with tempfile.TemporaryDirectory() as d:
        d = pathlib.Path(d)
        data.save(str(d / "run1.csv"))
        cfg = {
            "runs": [{"run_id": 1, "path": "run1.csv"}],
            "anchors": {"stride": 1, "offset": 0},
            "m_sim": 10000,
            "bootstrap_reps": 100,
            "bootstrap_m_sim": 10000,
            "band_reps": 100,
            "chi_m_sim": 10000,
            "deform_multistarts": 2,
            "seed": 1,
            "out_dir": "out",
        }
        (d / "config.json").write_text(json.dumps(cfg))
        outcomes = gx.run_pipeline(str(d / "config.json"))
        assert [o[2] for o in outcomes] == ["computed"] * len(outcomes)
        assert (d / "out" / "table2.csv").is_file()


if __name__ == "__main__":
    check_gauge()
    check_model()
    check_oracle()
    check_pipeline(check_fit())
    print("python smoke test: ok")
