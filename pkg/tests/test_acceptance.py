"""Acceptance checks, one test per criterion.

Each test prints a single ``C<k> PASS|FAIL ...`` line to the terminal
(with output capture suspended) and then asserts.  Run just this file with

    pytest tests/test_acceptance.py -v

The stochastic criteria use 1000 (or 500) replications and take a few
minutes in total on one core.
"""

import math
import signal
import socket
import subprocess
import sys
import time
from statistics import NormalDist

import httpx
import numpy as np
import pytest

from mabtestbed import deployment_fixtures as fx
from mabtestbed.analytics import engagement_summary, response_rate_table, reward_summary_table
from mabtestbed.bandit import (
    ArmSet,
    FeatureEncoding,
    arm_selection_probability,
    init_posterior,
    select_arm_ts,
    update_posterior,
    update_posterior_batch,
)
from mabtestbed.config import ExperimentConfig
from mabtestbed.evaluation import (
    EffectSpec,
    credible_interval,
    evaluate_scenario,
    fit_analysis_posterior,
    reward_report,
)
from mabtestbed.logs import read_csv
from mabtestbed.service import ExperimentService
from mabtestbed.simulation import TABLE_NOISE, run_replications, scenario_config

pytestmark = pytest.mark.acceptance

SEED = 0
REPS = 1000


@pytest.fixture
def report(capsys):
    def emit(label: str, ok: bool, detail: str, seconds: float) -> None:
        line = f"{label} {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def _rates(rows):
    return {(r["policy"], r["N"], r["effect"]): r["rate"] for r in rows}


def test_c1_uniform_fpr_scenario1(report):
    t0 = time.perf_counter()
    rates = _rates(evaluate_scenario(1, policies=["UniformRandom"], reps=REPS, seed=SEED))
    fpr = [rates[("UniformRandom", n, "Rationale")] for n in (100, 1000)]
    secs = time.perf_counter() - t0
    ok = all(0.02 <= x <= 0.07 for x in fpr) and secs < 120
    report("C1", ok, f"UR FPR N=100 {fpr[0]:.3f}, N=1000 {fpr[1]:.3f} (target [0.02, 0.07])", secs)


def test_c2_ts_fpr_scenario1_v_sweep(report):
    t0 = time.perf_counter()
    passing, parts = [], []
    for v in (0.25, 0.5, 1.0, 2.0):
        rates = _rates(
            evaluate_scenario(1, policies=["ContextualTS"], reps=REPS, seed=SEED, noise=v, analysis_noise=TABLE_NOISE)
        )
        a, b = rates[("ContextualTS", 100, "Rationale")], rates[("ContextualTS", 1000, "Rationale")]
        good = a <= 0.08 and b >= a - 0.02 and 0.03 <= b <= 0.12
        parts.append(f"v={v}: {a:.3f}/{b:.3f}{'*' if good else ''}")
        if good:
            passing.append(v)
    secs = time.perf_counter() - t0
    ok = bool(passing) and secs < 300
    report("C2", ok, "TS FPR N=100/N=1000 by bandit v (* meets criterion): " + ", ".join(parts), secs)


def test_c3_power_scenario2(report):
    t0 = time.perf_counter()
    rates = _rates(evaluate_scenario(2, reps=REPS, seed=SEED))
    ur100, ur1000 = rates[("UniformRandom", 100, "Rationale")], rates[("UniformRandom", 1000, "Rationale")]
    ts100, ts1000 = rates[("ContextualTS", 100, "Rationale")], rates[("ContextualTS", 1000, "Rationale")]
    secs = time.perf_counter() - t0
    ok = (
        abs(ur100 - 0.87) <= 0.07
        and ur1000 >= 0.99
        and ts100 <= ur100 - 0.05
        and ts1000 >= 0.90
        and secs < 300
    )
    report("C3", ok, f"power UR {ur100:.3f}/{ur1000:.3f}, TS {ts100:.3f}/{ts1000:.3f} (N=100/N=1000)", secs)


def test_c4_power_scenario3(report):
    t0 = time.perf_counter()
    rates = _rates(evaluate_scenario(3, reps=REPS, seed=SEED))
    inter = [rates[(p, n, "Rationale*Mood")] for p in ("ContextualTS", "UniformRandom") for n in (100, 1000)]
    ur_mood, ts_mood = rates[("UniformRandom", 100, "Mood")], rates[("ContextualTS", 100, "Mood")]
    secs = time.perf_counter() - t0
    ok = min(inter) >= 0.95 and ur_mood >= 0.85 and ts_mood <= ur_mood - 0.30 and secs < 300
    report(
        "C4",
        ok,
        f"interaction min {min(inter):.3f}; Mood at N=100 UR {ur_mood:.3f}, TS {ts_mood:.3f}",
        secs,
    )


def test_c5_reward_scenario3(report):
    t0 = time.perf_counter()
    rsets = [run_replications(scenario_config(3, 1000, p), 500, SEED) for p in ("ContextualTS", "UniformRandom")]
    rows = reward_report(rsets, {"Mood=0": {"Mood": 0}})
    mean = {(r["policy"], r["subgroup"]): r["mean_reward"] for r in rows}
    cell = mean[("ContextualTS", "Mood=0")] - mean[("UniformRandom", "Mood=0")]
    overall = mean[("ContextualTS", "overall")] - mean[("UniformRandom", "overall")]
    secs = time.perf_counter() - t0
    ok = abs(cell - 0.14) <= 0.07 and overall >= 0.05 and secs < 300
    report("C5", ok, f"TS-UR reward in Mood=0 cell {cell:+.3f} (target 0.14 +/- 0.07), overall {overall:+.3f}", secs)


def test_c6_deployment_tables(report):
    t0 = time.perf_counter()
    rr = response_rate_table(fx.response_rate_log(), "Link")
    pct = [round(rr.row(arm=a)["pct_responded"]) for a in (1, 0, "total")]
    e = engagement_summary(fx.engagement_log())
    eng = (round(100 * e["rate"], 2), round(100 * e["rater_fraction"], 1))
    cell = reward_summary_table(fx.reward_summary_log(), "Link").row(policy="ContextualTS", arm=1)
    triple = (cell["N"], round(cell["mean"], 3), round(cell["sem"], 3))
    secs = time.perf_counter() - t0
    ok = pct == [22, 20, 21] and eng == (9.54, 20.9) and triple == (232, 0.790, 0.018) and secs < 1
    report("C6", ok, f"response {pct}%, engagement {eng[0]}%/{eng[1]}%, cell N={triple[0]} {triple[1]:.3f} ({triple[2]:.3f})", secs)


def _coverage_rate() -> float:
    rng = np.random.default_rng(4242)
    enc = FeatureEncoding.full(ArmSet("Rationale", 2), ("Mood",))
    beta = np.array([0.4, 0.2, -0.1, 0.0])
    rejected = 0
    for _ in range(1000):
        X = enc.design(rng.integers(0, 2, 1000), rng.integers(0, 2, 1000).astype(float)[:, None])
        r = X @ beta + rng.normal(0, 1 / 6, 1000)
        s = update_posterior_batch(init_posterior(4, 1 / 6), X, r)
        rejected += credible_interval(s, EffectSpec("Rationale*Mood", draws=4000), rng, enc).rejected
    return rejected / 1000


def test_c7_property_suite(report):
    t0 = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(7)
    arms = ArmSet("Rationale", 2)
    enc = FeatureEncoding.full(arms, ("Mood",))
    X = enc.design(rng.integers(0, 2, 500), rng.integers(0, 2, 500).astype(float)[:, None])
    r = rng.choice([0, 0.25, 0.5, 0.75, 1.0], 500)
    seq = init_posterior(4, 0.5)
    for b, y in zip(X, r):
        seq = update_posterior(seq, b, y)
    batch = update_posterior_batch(init_posterior(4, 0.5), X, r)
    checks["sequential=batch"] = seq.allclose(batch, atol=1e-9)
    checks["min eig(B)>=1"] = np.linalg.eigvalsh(batch.B).min() >= 1 - 1e-12

    z = NormalDist().inv_cdf(0.975)
    cov = np.linalg.inv(batch.B)
    ci_ok = True
    for k, name in enumerate(enc.term_names):
        res = credible_interval(batch, EffectSpec(name, draws=100_000), 10 + k, enc)
        half = z * batch.v * math.sqrt(cov[k, k])
        ci_ok &= abs(res.lo - (batch.mu_hat[k] - half)) <= 0.02 * batch.v
        ci_ok &= abs(res.hi - (batch.mu_hat[k] + half)) <= 0.02 * batch.v
    checks["interval=analytic"] = ci_ok

    small = update_posterior_batch(init_posterior(4, 0.6), X[:5], r[:5])
    p = arm_selection_probability(small, {"Mood": 0}, arms, enc, 100_000, 11)
    pick_rng = np.random.default_rng(12)
    picks = np.array([select_arm_ts(small, {"Mood": 0}, arms, enc, pick_rng) for _ in range(100_000)])
    checks["TS freq=selection prob"] = bool(np.abs(np.bincount(picks, minlength=2) / 1e5 - p).max() <= 0.01)

    cov_rate = _coverage_rate()
    checks[f"coverage {cov_rate:.3f}"] = abs(cov_rate - 0.05) <= 0.02

    cfg = scenario_config(3, 200, 0.5)
    a, b = run_replications(cfg, 4, 3, workers=1), run_replications(cfg, 4, 3, workers=2)
    checks["replication determinism"] = all(x.equals(y) for x, y in zip(a.logs, b.logs))

    secs = time.perf_counter() - t0
    ok = all(checks.values()) and secs < 180
    report("C7", ok, ", ".join(f"{k}:{'ok' if v else 'FAIL'}" for k, v in checks.items()), secs)


# -- C8: real server process, killed and restarted ------------------------------


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _serve(port, data):
    proc = subprocess.Popen(
        [sys.executable, "-m", "mabtestbed.cli", "serve", "--port", str(port), "--data-dir", str(data), "--log-level", "warning"],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
    )
    url = f"http://127.0.0.1:{port}"
    deadline = time.time() + 20
    while time.time() < deadline:
        if proc.poll() is not None:
            raise RuntimeError(proc.stderr.read().decode())
        try:
            httpx.get(url + "/health", timeout=0.5)
            return proc, url
        except httpx.TransportError:
            time.sleep(0.1)
    proc.kill()
    raise RuntimeError("server did not start")


def test_c8_service_durability(tmp_path, report):
    t0 = time.perf_counter()
    data, port = tmp_path / "data", _free_port()
    spec = {
        "factors": [{"name": "Rationale", "levels": 2}],
        "context": [{"name": "Mood", "values": [0, 1], "default": 0}],
        "mixture_p": 0.5,
    }
    proc, url = _serve(port, data)
    try:
        with httpx.Client(base_url=url) as c:
            exp_id = c.post("/experiments", json=spec).json()["experiment_id"]
            ids = []
            for i in range(200):
                rec = c.post(f"/experiments/{exp_id}/assignment", json={"user": f"p{i % 60}", "context": {"Mood": i % 2}}).json()
                ids.append(rec["assignment_id"])
            for i, aid in enumerate(ids[::4]):
                assert c.post(f"/experiments/{exp_id}/rewards", json={"assignment_id": aid, "value": 1 + i % 5}).status_code == 200
            applied = c.post(f"/experiments/{exp_id}/refresh").json()["records_applied"]
            before = c.get(f"/experiments/{exp_id}/summary").json()
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait()
    proc, url = _serve(port, data)
    try:
        after = httpx.get(f"{url}/experiments/{exp_id}/summary").json()
        csv_path = tmp_path / "log.csv"
        csv_path.write_text(httpx.get(f"{url}/experiments/{exp_id}/log").text)
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=20)

    svc = ExperimentService(data)
    try:
        live = svc.experiment(exp_id).posteriors["Rationale"]
    finally:
        svc.close()
    cfg = ExperimentConfig.from_dict(spec)
    offline = fit_analysis_posterior(read_csv(csv_path), cfg.encoding("Rationale"), cfg.v("Rationale"))
    secs = time.perf_counter() - t0
    ok = applied == 50 and before == after and live.allclose(offline, atol=1e-9) and secs < 30
    report(
        "C8",
        ok,
        f"{applied} rewards applied; summary identical after kill/restart: {before == after}; "
        f"posterior vs offline fit max |d mu| {np.abs(live.mu_hat - offline.mu_hat).max():.1e}",
        secs,
    )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", *sys.argv[1:]]))
