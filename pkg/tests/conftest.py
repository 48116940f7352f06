import pytest
import torch

from maskbench.backbones import BackboneConfig, build_backbone
from maskbench.heads import build_classifier
from maskbench.synthset import DatasetSpec, SampleRecord, generate_dataset

# acceptance pass/fail lines, printed in the terminal summary
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, "PASS" if ok else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status, detail in ACCEPTANCE_RESULTS:
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(
        num_classes=2,
        num_bg_families=2,
        bias_strength=1.0,
        image_size=(32, 32),
        split_sizes={"pretrain": 8, "train": 16, "val": 8, "id_test": 8, "ood_test": 8},
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_records(tiny_spec) -> list[SampleRecord]:
    return generate_dataset(tiny_spec)


@pytest.fixture(scope="session")
def cnn32_config() -> BackboneConfig:
    return BackboneConfig(kind="cnn", image_size=(32, 32), width=8, seed=3)


@pytest.fixture(scope="session")
def vit32_config() -> BackboneConfig:
    return BackboneConfig(kind="vit", image_size=(32, 32), width=32, patch_size=8, num_blocks=3, num_heads=4, seed=3)


@pytest.fixture()
def cnn32_model(cnn32_config):
    return build_classifier(build_backbone(cnn32_config), "gap", 2, seed=5)


@pytest.fixture()
def vit32_model(vit32_config):
    return build_classifier(build_backbone(vit32_config), "concat", 2, seed=5)


@pytest.fixture()
def sample32(tiny_records):
    r = tiny_records[0]
    return r.image.clone(), r.mask.clone()


def assert_tensors_equal(a: torch.Tensor, b: torch.Tensor, msg: str = "") -> None:
    assert torch.equal(a, b), msg or f"tensors differ (max abs diff {(a - b).abs().max().item()})"
