from dataclasses import replace

import numpy as np
import pytest

from flowsr.autodiff import Tensor
from flowsr.baselines import (DiscreteSR, DiscreteSRConfig, discrete_sr_baseline, train_discrete,
                              trilinear_upsample, upsample_stages)
from flowsr.context import UNetConfig
from flowsr.data import normalize
from flowsr.fields import Field4

from oracles import grad_check


def test_trilinear_identity_at_native_resolution(small_field):
    out = trilinear_upsample(small_field, small_field.extents)
    np.testing.assert_allclose(out.data, small_field.data, rtol=1e-12, atol=1e-12)
    assert out.spacing == pytest.approx(small_field.spacing)


def test_trilinear_exact_on_linear_fields(small_field, rng):
    a = rng.standard_normal(3)
    g = np.meshgrid(*[small_field.coords(k) for k in range(3)], indexing="ij")
    lin = small_field.with_data(np.stack([sum(a[k] * g[k] for k in range(3))] * 4))
    out = trilinear_upsample(lin, (7, 15, 15))
    G = np.meshgrid(*[out.coords(k) for k in range(3)], indexing="ij")
    np.testing.assert_allclose(out.data[0], sum(a[k] * G[k] for k in range(3)), rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("upscale,stages", [((4, 8, 8), [(2, 2, 2), (2, 2, 2), (1, 2, 2)]),
                                            ((1, 2, 1), [(1, 2, 1)]), ((1, 1, 1), [])])
def test_upsample_stages(upscale, stages):
    assert upsample_stages(upscale) == stages


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        upsample_stages((3, 2, 2))


def _tiny_dcfg():
    return DiscreteSRConfig(unet=UNetConfig(n_c=3, base_width=2, depth=1), stage_widths=(3,),
                            upscale=(2, 2, 2))


def test_discrete_output_lattice(rng):
    model = DiscreteSR.build(_tiny_dcfg(), 0)
    lr = Field4(("p", "T", "u", "w"), rng.standard_normal((4, 2, 4, 4)), (0.4, 0.2, 0.2), (1.0, 0.1, 0.0))
    out = model.predict(lr)
    assert out.shape == (4, 4, 8, 8)
    assert out.spacing == pytest.approx((0.2, 0.1, 0.1)) and out.origin == lr.origin


def test_discrete_gradients(rng):
    model = DiscreteSR.build(_tiny_dcfg(), 0)
    names = list(model.named_parameters())
    x = rng.standard_normal((4, 2, 2, 2))

    def build(*ps):
        m = model.clone()
        for n, p in zip(names, ps):
            (m.gen.params if n.startswith("unet.") else m.params)[n.removeprefix("unet.")] = p
        return m.forward(Tensor(x))

    arrays = [p.data + 0.05 * rng.standard_normal(p.shape) for p in model.parameters()]
    assert grad_check(build, arrays, rng, floor=1.0) < 1e-6


def test_discrete_training_reduces_loss_and_denormalizes(tiny_dataset, tiny_cfg):
    cfg = replace(tiny_cfg, epochs=25, samples_per_epoch=2, batch_windows=1, lr=1e-2)
    dcfg = DiscreteSRConfig(unet=UNetConfig(n_c=4, base_width=2, depth=1), stage_widths=(4, 4),
                            upscale=(2, 4, 4))
    model, hist = train_discrete(cfg, tiny_dataset, dcfg)
    assert np.mean(hist.loss_pred[-3:]) < np.mean(hist.loss_pred[:3])
    pred = discrete_sr_baseline(model, tiny_dataset.lr, tiny_dataset.norm_stats)
    assert pred.shape == tiny_dataset.hr.shape
    raw = model.predict(normalize(tiny_dataset.lr, tiny_dataset.norm_stats)[0])
    mean, std = tiny_dataset.stats_arrays()
    np.testing.assert_allclose(pred.data, raw.data * std[:, None, None, None] + mean[:, None, None, None])


def test_discrete_upscale_must_match_dataset(tiny_dataset, tiny_cfg):
    with pytest.raises(ValueError):
        train_discrete(tiny_cfg, tiny_dataset, _tiny_dcfg())
