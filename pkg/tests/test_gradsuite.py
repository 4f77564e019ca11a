import numpy as np
import pytest

from egdnet.gradsuite import CASES, STRUCTURALLY_ZERO, TINY_MODEL, run_case, summarize
from egdnet.model import EGDNet
from egdnet.tensor import Tensor


@pytest.mark.parametrize("name", sorted(CASES))
def test_case_passes(name):
    # three instances here; the acceptance suite runs ten of every case
    report = summarize(name, run_case(name, instances=3))
    assert report.passed, str(report)


def test_registry_covers_every_block():
    required = {"irb", "caff", "ltr_encoder", "trfa", "model", "model_total_loss", "conv2d", "linear_attention"}
    assert required <= set(CASES)


def test_unknown_case():
    with pytest.raises(ValueError, match="unknown gradient case"):
        run_case("no_such_op")


def test_excluded_parameter_has_no_gradient():
    # the first backbone block's projection shift feeds straight into the next
    # block's batch norm, which removes any per-channel offset
    rng = np.random.default_rng(0)
    model = EGDNet(TINY_MODEL, rng=rng, dtype=np.float64)
    model.train()
    params = dict(model.named_parameters())
    rgb = Tensor(rng.random((2, 3, 32, 32)))
    depth, edge = model(rgb)
    r = rng.standard_normal(depth.shape)
    (depth * Tensor(r)).sum().backward()
    for name in STRUCTURALLY_ZERO:
        assert np.max(np.abs(params[name].grad)) < 1e-9
    # control: the next block's output is a tapped pyramid level, so its shift matters
    assert np.max(np.abs(params["backbone.1.project.bn.beta"].grad)) > 1e-6
