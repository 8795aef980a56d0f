import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ticketlab.config import (  # noqa: E402
    DataConfig,
    ExperimentConfig,
    ReportConfig,
    build_task_datasets,
    bundle,
)
from ticketlab.model import ModelConfig  # noqa: E402
from ticketlab.pruning import PruneConfig  # noqa: E402
from ticketlab.train import TrainConfig  # noqa: E402


def toy_config(seed: int = 0, max_rounds: int = 3, root: str = "data", run_dir: str = "runs/toy"
               ) -> ExperimentConfig:
    """Seconds-scale experiment: base width 4, 16x16 denoising, 2 epochs per round."""
    return ExperimentConfig(
        model=ModelConfig(base_dim=4, prompt_spatial=(4, 2, 2)),
        prune=PruneConfig(rate=0.2, target_sparsity=0.9, scope="global", max_rounds=max_rounds),
        train=TrainConfig(epochs=2, warmup=1, batch_size=4, eta_base=2e-3, eta_start=1e-4,
                          eta_min=1e-4, seed=seed, patch=16),
        data=DataConfig(tasks=["denoise"], size=16, n_train=10, n_test=4, noise_sigmas=[25.0],
                        seed=seed, root=root),
        report=ReportConfig(run_dir=run_dir),
    )


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_data(toy_cfg):
    return bundle(build_task_datasets(toy_cfg.data), toy_cfg.data.seed)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion (tests tagged with a ``criterion`` property)."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                detail = props.get("detail", "")
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for crit, verdict, detail in sorted(lines, key=lambda r: r[0]):
            terminalreporter.write_line(f"{verdict}  {crit}  {detail}".rstrip())
