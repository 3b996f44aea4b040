"""Shared fixtures, the finite-difference gradient harness, and the
acceptance-criteria summary printed after a run."""

import numpy as np
import pytest

from lorabench import model
from lorabench import tensor as T

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _ACCEPTANCE_RESULTS[name] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{_ACCEPTANCE_RESULTS[name]:4s} {name}")


def tape_value_and_grads(build, arrays):
    """Run build() on a tape over float copies of `arrays`; return (loss, grads)."""
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(tensors)
        tape.backward(loss)
    return float(loss.data), [t.grad for t in tensors]


def forward_value(build, arrays):
    tensors = [T.Tensor(a) for a in arrays]
    return float(build(tensors).data)


def central_diff(build, arrays, h=1e-6):
    """Central finite differences of the scalar build() w.r.t. every entry."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = forward_value(build, arrays)
            flat[i] = orig - step
            fm = forward_value(build, arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, arrays, tol=1e-6):
    """Assert tape gradients match central differences for every input."""
    _, got = tape_value_and_grads(build, arrays)
    want = central_diff(build, arrays)
    for i, (g, w) in enumerate(zip(got, want)):
        assert g is not None, f"input {i} received no gradient"
        assert g.shape == w.shape, f"input {i}: gradient shape {g.shape} != {w.shape}"
        err = rel_err(g, w)
        assert err <= tol, f"input {i}: finite-difference mismatch, rel err {err:.3g}"


@pytest.fixture
def tiny_config():
    # Small enough that a forward pass is sub-millisecond; long enough
    # that rendered eval samples fit.
    return model.ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=24, max_seq_len=256)


@pytest.fixture
def tiny_weights(tiny_config):
    return model.init_weights(tiny_config, seed=7)


# ---------------------------------------------------------------------------
# Micro recipe runs, shared across the CLI and report tests. A few dozen
# steps: far too short to learn anything, but every artifact gets written.

MICRO_PLANNING_CFG = """
[run]
recipe = planning
seeds = 0

[model]
d_model = 32
n_layers = 1
n_heads = 2
d_ff = 64
max_seq_len = 192

[train]
batch_size = 4
eval_every = 1000
lr_base = 3e-3
lr_lora = 1e-3
lr_entropy = 1e-2

[adapter]
rank = 4
alpha = 8.0
targets = Wq,Wv

[data]
hops_lo = 1
hops_hi = 2
max_chain = 2
eval_per_bucket = 3
base_max_steps = 40
adapter_steps = 20
high_hop = 2
"""

MICRO_REASONING_CFG = MICRO_PLANNING_CFG.replace(
    "recipe = planning", "recipe = reasoning").replace(
    """hops_lo = 1
hops_hi = 2
max_chain = 2
eval_per_bucket = 3""",
    """len_lo = 1
len_hi = 2
eval_per_bucket = 3""").replace("high_hop = 2", "threshold = 1.0")


def _run_micro(recipe: str, cfg_text: str, out_dir) -> None:
    from lorabench import cli
    cfg_path = out_dir.parent / f"{recipe}.cfg"
    cfg_path.write_text(cfg_text)
    rc = cli.main(["run-recipe", recipe, "--config", str(cfg_path),
                   "--out", str(out_dir)])
    assert rc == 0, f"micro {recipe} recipe failed"


@pytest.fixture(scope="session")
def micro_planning_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro") / "planning"
    _run_micro("planning", MICRO_PLANNING_CFG, out)
    return out


@pytest.fixture(scope="session")
def micro_reasoning_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro") / "reasoning"
    _run_micro("reasoning", MICRO_REASONING_CFG, out)
    return out


@pytest.fixture(scope="session")
def micro_compare_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro") / "compare"
    _run_micro("elora-compare",
               MICRO_REASONING_CFG.replace("recipe = reasoning",
                                           "recipe = elora-compare"), out)
    return out
