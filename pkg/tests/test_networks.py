import numpy as np
import pytest

from instapbm import networks
from instapbm.errors import ShapeError, ValidationError
from instapbm.losses import cross_entropy
from instapbm.tensor_engine import Tensor, backward, reduce, zero_grads
from instapbm.transforms import TASK_CLASS_COUNTS


def test_init_params_layout():
    params = networks.init_params([16, 8, 6, 3], seed=0, tasks=['vflip', 'rotate90'])
    assert params.input_dim == 16 and params.latent_dim == 6 and params.class_count == 3
    assert [w.shape for w in params.phi[::2]] == [(16, 8), (8, 6)]
    assert params.psi[0].shape == (6, 3)
    assert params.tasks == ['rotate90', 'vflip']
    for task in params.tasks:
        assert params.omega[task][0].shape == (6, TASK_CLASS_COUNTS[task])
    names = [name for name, _ in params.parameters()]
    assert names[:4] == ['phi.0.weight', 'phi.0.bias', 'phi.1.weight', 'phi.1.bias']
    assert names[4:6] == ['psi.0.weight', 'psi.0.bias']
    assert names[6:] == ['omega.rotate90.0.weight', 'omega.rotate90.0.bias',
                         'omega.vflip.0.weight', 'omega.vflip.0.bias']


def test_kaiming_uniform_bound_and_zero_bias():
    params = networks.init_params([50, 20, 4], seed=1)
    for index in range(0, len(params.phi), 2):
        weight, bias = params.phi[index], params.phi[index + 1]
        assert np.abs(weight.data).max() <= np.sqrt(6.0 / weight.shape[0])
        np.testing.assert_array_equal(bias.data, 0.0)


def test_init_is_deterministic_in_seed():
    a = networks.init_params([8, 4, 2], seed=5)
    b = networks.init_params([8, 4, 2], seed=5)
    c = networks.init_params([8, 4, 2], seed=6)
    np.testing.assert_array_equal(a.phi[0].data, b.phi[0].data)
    assert not np.array_equal(a.phi[0].data, c.phi[0].data)


@pytest.mark.parametrize('spec', [[], [4, 2], [4, 0, 2]])
def test_bad_layer_spec(spec):
    with pytest.raises(ValidationError):
        networks.init_params(spec, seed=0)


def test_unknown_task_head():
    with pytest.raises(ValidationError):
        networks.init_params([4, 3, 2], seed=0, tasks=['jigsaw'])


def test_forward_shapes_and_errors(rng):
    params = networks.init_params([10, 5, 3], seed=0, tasks=['rotate90'])
    x = Tensor(rng.normal(size=(7, 10)))
    assert networks.forward(params, x).shape == (7, 3)
    assert networks.forward(params, x, head='rotate90').shape == (7, 4)
    assert networks.features(params, x).shape == (7, 5)
    assert np.all(networks.features(params, x).data >= 0)
    with pytest.raises(ShapeError):
        networks.forward(params, Tensor(np.ones((2, 9))))
    with pytest.raises(ValidationError):
        networks.forward(params, x, head='vflip')


def test_predict_proba_rows_sum_to_one(rng):
    params = networks.init_params([6, 4, 3], seed=2)
    probs = networks.predict_proba(params, rng.normal(size=(5, 6)))
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(5))


def _fill_grads(params, value):
    for tensor in params.tensors():
        tensor.grad = np.full(tensor.shape, value)


def test_step_needs_gradients():
    params = networks.init_params([4, 3, 2], seed=0)
    with pytest.raises(ValidationError) as info:
        networks.step(params, networks.OptimState())
    assert 'phi.0.weight' in str(info.value)


def test_sgd_momentum_first_step():
    params = networks.init_params([4, 3, 2], seed=0)
    before = params.psi[0].data.copy()
    _fill_grads(params, 0.5)
    opt = networks.OptimState(kind='sgd_momentum', lr=0.1, weight_decay=0.01)
    networks.step(params, opt)
    np.testing.assert_allclose(params.psi[0].data, before - 0.1 * (0.5 + 0.01 * before))
    assert opt.step_count == 1


def test_adam_first_step_moves_by_lr_times_sign():
    params = networks.init_params([4, 3, 2], seed=0)
    before = params.phi[0].data.copy()
    for tensor in params.tensors():
        tensor.grad = np.where(np.arange(tensor.data.size).reshape(tensor.shape) % 2 == 0, 2.0, -3.0)
    networks.step(params, networks.OptimState(kind='adam', lr=0.01, weight_decay=0.0))
    expected = before - 0.01 * np.sign(params.phi[0].grad)
    np.testing.assert_allclose(params.phi[0].data, expected, atol=1e-8)


def test_bad_optimizer_settings():
    with pytest.raises(ValidationError):
        networks.OptimState(kind='rmsprop')
    with pytest.raises(ValidationError):
        networks.OptimState(lr=0.0)


def test_training_step_reduces_loss(rng):
    params = networks.init_params([3, 8, 2], seed=0)
    x = Tensor(rng.normal(size=(20, 3)))
    opt = networks.OptimState(kind='sgd_momentum', lr=0.05, weight_decay=0.0)

    def loss_value():
        return reduce('mean', networks.forward(params, x) * Tensor([[1.0, -1.0]]))

    start = loss_value().item()
    for _ in range(5):
        for tensor in params.tensors():
            tensor.grad = None
        backward(loss_value())
        networks.step(params, opt)
    assert loss_value().item() < start


def test_checkpoint_round_trip(tmp_path):
    params = networks.init_params([6, 5, 4, 3], seed=9, tasks=['patch_location'])
    path = str(tmp_path / 'checkpoint.bin')
    networks.save_checkpoint(path, params, step_count=42)
    loaded, header = networks.load_checkpoint(path)
    assert header['step'] == 42 and header['layer_sizes'] == [6, 5, 4, 3]
    for (name, original), (loaded_name, restored) in zip(params.parameters(), loaded.parameters()):
        assert name == loaded_name
        np.testing.assert_array_equal(original.data, restored.data)

    raw = open(path, 'rb').read()
    header_len = int(np.frombuffer(raw[:8], dtype='<u8')[0])
    assert raw[8:8 + header_len].startswith(b'{')


def test_truncated_checkpoint(tmp_path):
    params = networks.init_params([4, 3, 2], seed=0)
    path = str(tmp_path / 'checkpoint.bin')
    networks.save_checkpoint(path, params)
    raw = open(path, 'rb').read()
    with open(path, 'wb') as handle:
        handle.write(raw[:-8])
    with pytest.raises(ValidationError):
        networks.load_checkpoint(path)


def test_heads_share_one_feature_extractor(rng):
    params = networks.init_params([6, 5, 3], seed=4, tasks=['rotate90', 'vflip'])
    x = rng.normal(size=(4, 6))
    z = networks.features(params, Tensor(x)).data
    for head in ['label', 'rotate90', 'vflip']:
        weight, bias = params.psi if head == 'label' else params.omega[head]
        expected = z @ weight.data + bias.data
        np.testing.assert_allclose(networks.forward(params, Tensor(x), head=head).data, expected, atol=1e-12)


def test_forward_matches_unrolled_layers(rng):
    params = networks.init_params([7, 6, 4, 3], seed=8)
    x = rng.normal(size=(5, 7))
    hidden = np.maximum(x @ params.phi[0].data + params.phi[1].data, 0.0)
    hidden = np.maximum(hidden @ params.phi[2].data + params.phi[3].data, 0.0)
    logits = hidden @ params.psi[0].data + params.psi[1].data
    np.testing.assert_allclose(networks.forward(params, Tensor(x)).data, logits, atol=1e-12)


def test_sgd_on_cross_entropy_descends_monotonically(rng):
    params = networks.init_params([4, 8, 3], seed=1)
    x = Tensor(rng.normal(size=(30, 4)))
    labels = rng.integers(0, 3, size=30)
    opt = networks.OptimState(kind='sgd_momentum', lr=0.01, momentum=0.0, weight_decay=0.0)
    history = []
    for _ in range(50):
        zero_grads(params.tensors())
        loss = cross_entropy(networks.forward(params, x), labels)
        history.append(loss.item())
        backward(loss)
        networks.step(params, opt)
    assert all(later <= earlier + 1e-12 for earlier, later in zip(history, history[1:]))
    assert history[-1] < history[0]


@pytest.mark.parametrize('kind', ['adam', 'sgd_momentum'])
def test_step_leaves_unreached_heads_alone(rng, kind):
    params = networks.init_params([4, 3, 2], seed=0, tasks=['rotate90'])
    head_before = [tensor.data.copy() for tensor in params.omega['rotate90']]
    opt = networks.OptimState(kind=kind, lr=0.05, weight_decay=0.1)
    x = Tensor(rng.normal(size=(6, 4)))
    for _ in range(3):
        zero_grads(params.tensors())
        backward(cross_entropy(networks.forward(params, x), np.array([0, 1, 0, 1, 0, 1])))
        networks.step(params, opt)
    for before, tensor in zip(head_before, params.omega['rotate90']):
        np.testing.assert_array_equal(tensor.data, before)
    assert not any(name.startswith('omega.') for name in opt.buffers)


def test_adam_bias_correction_counts_per_tensor(rng):
    params = networks.init_params([4, 3, 2], seed=0, tasks=['rotate90'])
    opt = networks.OptimState(kind='adam', lr=0.01, weight_decay=0.0)
    x = Tensor(rng.normal(size=(6, 4)))
    for _ in range(4):
        zero_grads(params.tensors())
        backward(cross_entropy(networks.forward(params, x), np.array([0, 1, 0, 1, 0, 1])))
        networks.step(params, opt)
    bias = params.omega['rotate90'][1]
    before = bias.data.copy()
    zero_grads(params.tensors())
    backward(reduce('sum', networks.forward(params, x, head='rotate90')))
    networks.step(params, opt)
    # first update of this head: a full lr-sized move per coordinate
    np.testing.assert_allclose(np.abs(bias.data - before), 0.01, rtol=1e-4)
