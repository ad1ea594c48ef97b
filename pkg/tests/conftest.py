import torch

# single-threaded kernels keep loss streams bit-reproducible
torch.set_num_threads(1)

ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")


import pytest  # noqa: E402


@pytest.fixture(scope="session")
def tiny_stage1():
    """8-identity synthetic set and a briefly trained stage-I checkpoint payload."""
    from fdgan.data import SynthSpec, generate_synthetic_dataset
    from fdgan.losses import LossWeights
    from fdgan.models import ModelConfig
    from fdgan.train import TrainConfig, run_stage1

    ds = generate_synthetic_dataset(SynthSpec(n_identities=8, images_per_identity=6, seed=5))
    torch.manual_seed(0)
    tcfg = TrainConfig(batch_pairs=16, positive_pairs=4, iters_per_epoch=5)
    state = run_stage1(ds, ModelConfig(), tcfg, LossWeights(), max_iterations=10)
    return ds, state.payload()
