import numpy as np
import pytest

from glefld.data import generate_synthetic_dataset, prepare_samples
from glefld.network import NetworkConfig, build_network, forward
from glefld.serialization import ChecksumError, FormatError, encode_checkpoint
from glefld.tensor import GradTape, Tensor
from glefld.train import (Optimizer, OptimizerConfig, Trainer, TrainingError, collate, load_checkpoint,
                          masked_mse_loss, resume_trainer, save_checkpoint, train_step)

TOY = NetworkConfig(input_size=32, width=1 / 16, k=1)


@pytest.fixture(scope="module")
def samples():
    return prepare_samples(generate_synthetic_dataset(12, 32, 3), 32)


def ones_mask(n=2, c=8):
    return np.ones((n, c), dtype=bool)


# -- loss ----------------------------------------------------------------------

def test_loss_perfect_prediction_is_zero():
    t = np.random.default_rng(0).uniform(size=(2, 8, 4, 4))
    assert masked_mse_loss(Tensor(t), t, ones_mask()).item() == 0.0


def test_loss_constant_offset():
    t = np.random.default_rng(0).uniform(size=(2, 8, 4, 4))
    assert masked_mse_loss(Tensor(t + 0.5), t, ones_mask()).item() == pytest.approx(0.25, abs=1e-15)


def test_loss_ignores_masked_channel_errors():
    t = np.zeros((1, 2, 3, 3))
    p = t.copy()
    p[0, 1] = 7.0
    assert masked_mse_loss(Tensor(p), t, np.array([[True, False]])).item() == 0.0


def test_loss_zero_participating_channels_is_zero():
    assert masked_mse_loss(Tensor(np.ones((1, 2, 3, 3))), np.zeros((1, 2, 3, 3)),
                           np.zeros((1, 2), dtype=bool)).item() == 0.0


def test_loss_averages_over_unmasked_elements():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    mask = np.array([[True, False, True], [False, False, True]])
    expected = np.mean([(p[i, c] - t[i, c]) ** 2 for i in range(2) for c in range(3) if mask[i, c]])
    assert abs(masked_mse_loss(Tensor(p), t, mask).item() - expected) < 1e-15


def test_masked_channel_gradient_is_zero():
    rng = np.random.default_rng(2)
    pred = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    mask = np.array([[True, False, True], [True, True, False]])
    with GradTape() as tape:
        loss = masked_mse_loss(pred, rng.normal(size=(2, 3, 4, 4)), mask)
    tape.backward(loss)
    assert not pred.grad[0, 1].any() and not pred.grad[1, 2].any()
    assert pred.grad[0, 0].any()


def test_loss_non_negative_property():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p, t = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
        mask = rng.random((2, 2)) < 0.5
        assert masked_mse_loss(Tensor(p), t, mask).item() >= 0.0


# -- optimizer / step ------------------------------------------------------------

def test_optimizer_config_validation():
    with pytest.raises(ValueError, match="learning_rate"):
        OptimizerConfig(learning_rate=-1.0).validate()
    with pytest.raises(ValueError, match="batch_size"):
        OptimizerConfig(batch_size=0).validate()
    with pytest.raises(ValueError, match="kind"):
        OptimizerConfig(kind="rmsprop").validate()


@pytest.mark.parametrize("kind", ["adam", "sgd_momentum"])
def test_zero_learning_rate_leaves_parameters_unchanged(samples, kind):
    net = build_network(TOY, 0)
    before = [p.data.copy() for p in net.parameters()]
    opt = Optimizer(OptimizerConfig(kind=kind, learning_rate=0.0))
    for step in range(3):
        train_step(net, collate(samples[:4]), opt, step)
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(before, net.parameters()))


def test_train_step_zeroes_gradients(samples):
    net = build_network(TOY, 0)
    train_step(net, collate(samples[:2]), Optimizer(OptimizerConfig()))
    assert all(not p.grad.any() for p in net.parameters())


def test_all_masked_batch_is_an_error(samples):
    images, targets, masks = collate(samples[:2])
    with pytest.raises(TrainingError, match="masked") as info:
        train_step(build_network(TOY, 0), (images, targets, np.zeros_like(masks)), Optimizer(OptimizerConfig()), 17)
    assert info.value.step == 17


def test_non_finite_loss_carries_step_and_keeps_state(samples):
    net = build_network(TOY, 0)
    images, targets, masks = collate(samples[:2])
    before = {k: v.copy() for k, v in net.state_tensors().items()}
    images = images.copy()
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train_step(net, (images, targets, masks), Optimizer(OptimizerConfig()), 42)
    assert info.value.step == 42 and "step 42" in str(info.value)
    after = net.state_tensors()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_single_sample_overfits():
    sample = prepare_samples(generate_synthetic_dataset(1, 64, 1), 64)
    trainer = Trainer(NetworkConfig(input_size=64, width=1 / 8, k=2), OptimizerConfig(batch_size=1), sample)
    losses = trainer.run(500)
    assert losses[-1] < 1e-3


def test_four_samples_overfit():
    data = prepare_samples(generate_synthetic_dataset(4, 64, 1), 64)
    trainer = Trainer(NetworkConfig(input_size=64, width=1 / 8, k=2), OptimizerConfig(batch_size=4), data)
    losses = []
    for _ in range(2000):
        losses.append(trainer.step())
        if losses[-1] < 1e-3:
            break
    assert losses[-1] < 1e-3


def test_training_is_bitwise_deterministic(samples):
    runs = []
    for _ in range(2):
        trainer = Trainer(TOY, OptimizerConfig(batch_size=4, seed=5), samples)
        runs.append((trainer.run(6), encode_checkpoint(trainer.checkpoint_meta(), trainer.checkpoint_tensors())))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_epoch_order_is_a_permutation(samples):
    trainer = Trainer(TOY, OptimizerConfig(batch_size=5, seed=1), samples)
    seen = []
    for _ in range(trainer.steps_per_epoch):
        seen += [id(s) for s in trainer._next_batch()]
    assert sorted(seen) == sorted(id(s) for s in samples)


# -- checkpoints -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["adam", "sgd_momentum"])
def test_resume_equivalence(tmp_path, samples, kind):
    cfg = OptimizerConfig(kind=kind, learning_rate=1e-3 if kind == "adam" else 1e-2, batch_size=5, seed=2)
    straight = Trainer(TOY, cfg, samples)
    losses_straight = straight.run(20)

    first = Trainer(TOY, cfg, samples)
    losses = first.run(10)
    save_checkpoint(tmp_path / "c.ckpt", first)
    resumed = resume_trainer(tmp_path / "c.ckpt", samples)
    losses += resumed.run(10)

    assert losses == losses_straight
    for (n, a), (_, b) in zip(straight.net.state_tensors().items(), resumed.net.state_tensors().items()):
        assert a.tobytes() == b.tobytes(), n
    save_checkpoint(tmp_path / "a.ckpt", straight)
    save_checkpoint(tmp_path / "b.ckpt", resumed)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_save_load_save_is_byte_identical(tmp_path, samples):
    trainer = Trainer(TOY, OptimizerConfig(batch_size=4), samples)
    trainer.run(2)
    save_checkpoint(tmp_path / "a.ckpt", trainer)
    again = resume_trainer(tmp_path / "a.ckpt", samples)
    save_checkpoint(tmp_path / "b.ckpt", again)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_restores_parameters_bitwise(tmp_path, samples):
    trainer = Trainer(TOY, OptimizerConfig(batch_size=4), samples)
    trainer.run(2)
    save_checkpoint(tmp_path / "a.ckpt", trainer)
    net = load_checkpoint(tmp_path / "a.ckpt").build_network()
    for (n, a), (_, b) in zip(trainer.net.state_tensors().items(), net.state_tensors().items()):
        assert a.tobytes() == b.tobytes(), n
    x = Tensor(np.stack([s.image for s in samples[:2]]))
    assert forward(trainer.net, x, "eval").data.tobytes() == forward(net, x, "eval").data.tobytes()


def test_corrupt_last_byte_fails_checksum(tmp_path, samples):
    trainer = Trainer(TOY, OptimizerConfig(batch_size=4), samples)
    save_checkpoint(tmp_path / "a.ckpt", trainer)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "a.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "a.ckpt")


def test_truncated_checkpoint_rejected(tmp_path, samples):
    save_checkpoint(tmp_path / "a.ckpt", Trainer(TOY, OptimizerConfig(batch_size=4), samples))
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "a.ckpt")


def test_checkpoint_shape_mismatch_rejected(tmp_path, samples):
    trainer = Trainer(TOY, OptimizerConfig(batch_size=4), samples)
    meta = trainer.checkpoint_meta()
    tensors = trainer.checkpoint_tensors()
    tensors["head.bias"] = np.zeros(3)
    (tmp_path / "a.ckpt").write_bytes(encode_checkpoint(meta, tensors))
    with pytest.raises(Exception, match="head.bias"):
        load_checkpoint(tmp_path / "a.ckpt").build_network()
