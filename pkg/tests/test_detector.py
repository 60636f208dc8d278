import numpy as np
import pytest

from danet.config import OptimConfig, RunConfig, Toggles
from danet.data import SyntheticSpec, generate_synthetic
from danet.detector import Detector
from danet.detector.model import rpn_forward
from danet.detector.train import TrainingError, learning_rate, load_model, save_model, stack_images, targets_for, train
from danet.tensor import Tensor


def small_config(**toggles):
    cfg = RunConfig()
    cfg.toggles = Toggles(**toggles)
    cfg.backbone.base_width = 4
    cfg.backbone.blocks_per_stage = 1
    cfg.backbone.cbam_reduction = 4
    cfg.head.fpn_channels = 16
    cfg.head.rpn_channels = 16
    cfg.head.hidden = 16
    cfg.head.roi_batch = 16
    cfg.optim = OptimConfig(epochs=1, batch_size=2, milestones=(5,))
    cfg.seed = 3
    return cfg


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic(SyntheticSpec(image_size=64, max_side=20, seed=8), 4)


def test_blank_image_untrained_is_empty():
    model = Detector(small_config())
    dets = model.detect(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)), score_thr=0.99)
    assert dets == [[]]


def test_same_seed_same_model_and_output(samples):
    a, b = Detector(small_config()), Detector(small_config())
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    img = stack_images(samples[:2])
    assert a.detect(img, 0.0) == a.detect(img, 0.0) == b.detect(img, 0.0)


def test_rpn_zero_weights(samples):
    model = Detector(small_config())
    for _, p in model.rpn.named_parameters():
        p.data[:] = 0
    pyr = model.features(stack_images(samples[:1]))
    probs, deltas = rpn_forward(pyr, model.rpn)
    assert np.all(probs.data == 0.5) and not deltas.data.any()
    assert probs.shape[1] == len(model.anchors(pyr)) == deltas.shape[1]


def test_rpn_counts_single_level(samples):
    model = Detector(small_config(fpn=False))
    pyr = model.features(stack_images(samples[:1]))
    probs, _ = rpn_forward(pyr, model.rpn)
    # one 4x4 map at stride 16, every anchor size and ratio per location
    assert list(pyr) == [4] and probs.shape == (1, 4 * 4 * 12)


def test_proposals_clipped_and_valid(samples, rng):
    model = Detector(small_config())
    pyr = model.features(stack_images(samples[:2]))
    logits, deltas = model.rpn(pyr)
    noisy = deltas.data + rng.normal(0, 3, size=deltas.shape).astype(np.float32)
    for props in model.proposals(pyr, logits.data, noisy, (64, 64)):
        assert len(props) <= model.config.head.rpn_post_nms
        assert np.all(props[:, 0] >= 0) and np.all(props[:, 2] <= 64)
        assert np.all(props[:, 1] >= 0) and np.all(props[:, 3] <= 64)
        assert np.all(props[:, 0] < props[:, 2]) and np.all(props[:, 1] < props[:, 3])


@pytest.mark.parametrize(
    "toggles",
    [dict(fpn=False, dcn=False, cbam=False, focal=False), dict(fpn=True, dcn=True, cbam=True, focal=False), dict()],
)
def test_loss_terms_finite_and_differentiable(samples, toggles):
    model = Detector(small_config(**toggles))
    losses = model.loss(stack_images(samples[:2]), targets_for(samples[:2], model.config.classes))
    assert set(losses) == {"total", "rpn_cls", "rpn_box", "head_cls", "head_box"}
    assert all(np.isfinite(float(v.data)) and float(v.data) >= 0 for v in losses.values())
    losses["total"].backward()
    grads = [p.grad for p in model.parameters()]
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads)


def test_lr_zero_step_leaves_weights(samples):
    cfg = small_config()
    cfg.optim = OptimConfig(lr=0.0, epochs=1, batch_size=4)
    model = Detector(cfg)
    before = model.state_dict()
    train(model, samples, cfg)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_epochs_checkpoint_equals_init(samples, tmp_path):
    cfg = small_config()
    cfg.optim = OptimConfig(epochs=0)
    model = Detector(cfg)
    result = train(model, samples, cfg)
    assert result.rows == []
    save_model(model, tmp_path / "a.dant")
    save_model(Detector(cfg), tmp_path / "b.dant")
    assert (tmp_path / "a.dant").read_bytes() == (tmp_path / "b.dant").read_bytes()


def test_training_is_reproducible(samples, tmp_path):
    cfg = small_config()
    runs = []
    for name in ("a", "b"):
        model = Detector(cfg)
        train(model, samples, cfg, log_path=tmp_path / f"{name}.csv")
        save_model(model, tmp_path / f"{name}.dant")
        runs.append(model)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.dant").read_bytes() == (tmp_path / "b.dant").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,step,total,rpn_cls,rpn_box,head_cls,head_box"
    loaded = load_model(cfg, tmp_path / "a.dant")
    assert all(np.array_equal(v, runs[0].state_dict()[k]) for k, v in loaded.state_dict().items())


@pytest.mark.filterwarnings("ignore:invalid value")
def test_nan_input_aborts(samples):
    cfg = small_config()
    model = Detector(cfg)
    bad = [type(s)(s.image.copy(), s.annotation) for s in samples]
    for s in bad:
        s.image[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, bad, cfg)


def test_empty_training_set():
    with pytest.raises(TrainingError, match="empty"):
        train(Detector(small_config()), [])


def test_learning_rate_schedule():
    cfg = RunConfig()
    cfg.optim = OptimConfig(lr=0.02, milestones=(2, 4), warmup_steps=10)
    assert learning_rate(cfg, 0, 0) == pytest.approx(0.02 * 0.001)
    assert learning_rate(cfg, 0, 5) == pytest.approx(0.02 * (0.001 + 0.999 * 0.5))
    assert learning_rate(cfg, 1, 10) == 0.02
    assert learning_rate(cfg, 2, 50) == pytest.approx(0.002)
    assert learning_rate(cfg, 4, 90) == pytest.approx(0.0002)


def test_image_without_objects_trains(samples):
    cfg = small_config()
    from danet.data import Annotation, Sample

    blank = Sample(np.full((1, 64, 64), 0.2), Annotation("blank", 64, 64, []))
    losses = Detector(cfg).loss(stack_images([blank, samples[0]]), targets_for([blank, samples[0]], cfg.classes))
    assert np.isfinite(float(losses["total"].data))
