import numpy as np
import pytest

from acmesim.data import SyntheticTask
from acmesim.nn.transformer import Classifier, LinearHeader, TransformerConfig, ViTBackbone


def tiny_config(**kw) -> TransformerConfig:
    base = dict(depth=2, num_heads=4, hidden_dim=8, ffn_dim=16, num_patches=4, num_classes=3,
                patch_dim=5, seed=0)
    base.update(kw)
    return TransformerConfig(**base)


def tiny_classifier(**kw) -> Classifier:
    cfg = tiny_config(**kw)
    return Classifier(ViTBackbone(cfg), LinearHeader(cfg.hidden_dim, cfg.num_classes, cfg.seed + 1))


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_task():
    return SyntheticTask(num_classes=3, num_patches=4, patch_dim=5, signal=1.0, seed=0)


def toy_reference(seed: int = 0, depth: int = 1, train_steps: int = 0, n: int = 256):
    """(reference model, train set, probe set) on a 3-class toy task."""
    from acmesim.family import ReferenceModel
    from acmesim.training import train_classifier

    ref = ReferenceModel.build(tiny_config(depth=depth, seed=seed))
    task = SyntheticTask(3, 4, 5, signal=1.0, seed=seed)
    r = np.random.default_rng(seed)
    train, probe = task.sample(n, r), task.sample(n, r)
    if train_steps:
        train_classifier(ref.classifier(), train, train_steps, 1e-2, 32, r)
    return ref, train, probe


def quick_config(seed: int = 0, **sections):
    """The bundled two-cluster config with every loop shortened, for pipeline tests."""
    from acmesim import config

    raw = config.bundled("default").to_dict()
    raw["seed"] = seed
    raw["model"].update(train_steps=40)
    raw["family"].update(distill_steps=4, probe_size=64)
    raw["nas"].update(budget=2, shared_steps=2, finetune_steps=10, edge_samples=128)
    raw["personalization"].update(rounds=1, local_steps=5)
    raw["data"].update(public_size=256, public_val_size=128, train_per_device=64,
                       test_per_device=48)
    for name, over in sections.items():
        raw[name].update(over)
    return config.from_dict(raw)


# acceptance lines, echoed after the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
