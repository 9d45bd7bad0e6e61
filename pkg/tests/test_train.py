import numpy as np
import pytest

from u2airway.errors import FormatError, NumericError, ValidationError
from u2airway.phantom import PhantomConfig, gen_phantom
from u2airway.preprocess import Volume, make_inputs, normalize_volume
from u2airway.tensor import Tensor
from u2airway.train import (LossCurve, TrainConfig, evaluate, load_checkpoint, read_manifest,
                            save_checkpoint, score_prediction, train, validation_loss)
from u2airway.u2net import U2NetSpec, init_params, u2net_forward

TOY = U2NetSpec.toy()


@pytest.fixture(scope="module")
def small_case():
    ph = gen_phantom(PhantomConfig(dims=(6, 32, 32), trunk_radius=3, trunk_length=4, branch_depth=1), 0)
    stack = make_inputs(normalize_volume(ph.volume))
    data = [(s, m.astype(np.float32)) for s, m in zip(stack.slices, ph.mask.values)]
    return ph, data


@pytest.fixture(scope="module")
def trained(small_case):
    _, data = small_case
    return train(TrainConfig(epochs=2, seed=1), TOY, data)


def test_single_sample_single_step():
    # 64 x 64 so a batch of one still gives the deepest batch norm 2x2 values
    x = np.random.default_rng(0).standard_normal((2, 64, 64)).astype(np.float32)
    m = np.zeros((64, 64), dtype=np.float32)
    m[20:40, 20:40] = 1
    ckpt, curve = train(TrainConfig(batch_size=2, epochs=1), TOY, [(x, m)])
    assert ckpt.step == 1 and len(curve.points) == 1
    assert curve.points[0].val_loss is None


def test_step_arithmetic(small_case, trained):
    # 6 samples -> 2 held out -> 4 train -> 2 batches per epoch
    ckpt, curve = trained
    assert ckpt.step == 4 == ckpt.opt_state.step
    assert [p.step for p in curve.points] == [1, 2, 3, 4]
    assert [p.epoch for p in curve.points] == [1, 1, 2, 2]
    assert curve.points[1].val_loss is not None and curve.points[0].val_loss is None
    assert all(np.isfinite(p.train_loss) for p in curve.points)


def test_max_steps(small_case):
    _, data = small_case
    ckpt, curve = train(TrainConfig(epochs=50, max_steps=3), TOY, data)
    assert ckpt.step == 3 and curve.points[-1].step == 3


@pytest.mark.parametrize("opt", ["adam", "sgd"])
def test_zero_lr_keeps_params(small_case, opt):
    _, data = small_case
    store = init_params(TOY, 0, np.float32)
    before = {k: t.data.copy() for k, t in store.params.items()}
    train(TrainConfig(optimizer=opt, lr=0.0, epochs=1), TOY, data, store=store)
    for k, t in store.params.items():
        assert t.data.tobytes() == before[k].tobytes()


def test_training_is_deterministic(small_case, trained):
    _, data = small_case
    _, again = train(TrainConfig(epochs=2, seed=1), TOY, data)
    assert again.to_csv() == trained[1].to_csv()


def test_non_finite_loss_reports_step(small_case):
    _, data = small_case
    bad = [(np.full_like(x, np.nan), m) for x, m in data]
    with pytest.raises(NumericError) as e:
        train(TrainConfig(), TOY, bad)
    assert e.value.step == 1 and "step 1" in str(e.value)


def test_dataset_checks(small_case):
    with pytest.raises(ValidationError):
        train(TrainConfig(), TOY, [])
    x = np.zeros((2, 16, 16), dtype=np.float32)
    with pytest.raises(ValidationError, match="minimum legal extent"):
        train(TrainConfig(), TOY, [(x, np.zeros((16, 16)))])


def test_config_validation():
    for kw in (dict(optimizer="lbfgs"), dict(lr=-1), dict(batch_size=0), dict(epochs=0),
               dict(test_fraction=1.0), dict(dtype="int8")):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)


def test_validation_pass_is_read_only(small_case, trained):
    _, data = small_case
    ckpt, _ = trained
    before = ckpt.store.digest()
    validation_loss(TOY, ckpt.store, data, [0, 1, 2], TrainConfig(), np.float32)
    assert ckpt.store.digest() == before


# loss curve

def test_curve_csv_roundtrip(trained):
    curve = trained[1]
    text = curve.to_csv()
    assert text.splitlines()[0] == "epoch,step,train_loss,val_loss"
    assert LossCurve.from_csv(text).points == curve.points


def test_curve_steps_strictly_increase():
    c = LossCurve()
    c.append(1, 1, 0.5)
    with pytest.raises(ValueError):
        c.append(1, 1, 0.4)


# checkpoints

def test_checkpoint_roundtrip(tmp_path, trained, small_case):
    ckpt, _ = trained
    p = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, p)
    back = load_checkpoint(p)
    assert back.spec == ckpt.spec and back.step == ckpt.step
    assert back.store.digest() == ckpt.store.digest()
    assert back.opt_state.step == ckpt.opt_state.step
    for k, v in ckpt.opt_state.buffers.items():
        assert np.array_equal(back.opt_state.buffers[k], v)
    x = Tensor(np.stack([small_case[1][0][0]]))
    a = u2net_forward(x, TOY, ckpt.store, training=False).fuse.data
    b = u2net_forward(x, TOY, back.store, training=False).fuse.data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_size_audit(tmp_path, trained):
    for spec in (TOY, U2NetSpec.toy(side_channels=3), U2NetSpec.lite(width_factor=0.125)):
        ckpt = trained[0]
        if spec != TOY:
            ckpt = type(ckpt)(spec, init_params(spec, 0, np.float32), ckpt.opt_state.__class__(), 0)
        p = tmp_path / "s.ckpt"
        save_checkpoint(ckpt, p)
        raw = p.read_bytes()
        _, tensors, head_len = read_manifest(raw)
        assert sum(t[3] for t in tensors) == len(raw) - head_len


def test_truncated_checkpoint_names_tensor(tmp_path, trained):
    p = tmp_path / "t.ckpt"
    save_checkpoint(trained[0], p)
    raw = p.read_bytes()
    _, tensors, head_len = read_manifest(raw)
    victim = tensors[len(tensors) // 2]
    p.write_bytes(raw[: head_len + victim[2] + 1])
    with pytest.raises(FormatError) as e:
        load_checkpoint(p)
    assert e.value.field == victim[0]
    assert victim[0] in str(e.value)
    p.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"NOPE\n\n")
    with pytest.raises(FormatError):
        load_checkpoint(p)


# evaluation

def test_score_identity_and_empty(small_case):
    ph, _ = small_case
    gt = ph.mask.values
    assert score_prediction(gt.astype(np.float32), gt) == 1.0
    assert score_prediction(np.zeros(gt.shape), gt) == 0.0


def test_evaluate_reports_each_case(tmp_path, trained, small_case):
    ph, _ = small_case
    ckpt = trained[0]
    before = ckpt.store.digest()
    bad = Volume(ph.volume.values[:, :, :31])
    results, mean = evaluate(ckpt, [("ok", ph.volume, ph.mask), ("bad", bad, ph.mask.values[:, :, :31]),
                                    ("shape", ph.volume, ph.mask.values[:3])])
    assert [r.name for r in results] == ["ok", "bad", "shape"]
    assert results[0].dsc is not None and 0 <= results[0].dsc <= 1
    assert results[1].dsc is None and "minimum legal extent" in results[1].error
    assert results[2].dsc is None
    assert mean == results[0].dsc
    assert ckpt.store.digest() == before
    p = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, p)
    again, _ = evaluate(load_checkpoint(p), [("ok", ph.volume, ph.mask)])
    assert again[0].dsc == results[0].dsc
