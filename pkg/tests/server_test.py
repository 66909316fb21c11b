import numpy as np
import pytest

from fllsim.core.datasets import partition_iid
from fllsim.core.encoder import set_trainable
from fllsim.core.errors import ProtocolError
from fllsim.core.federation.client import ClientPool, ClientUpdate, TrainSettings
from fllsim.core.federation.schedule import RoundPlan
from fllsim.core.federation.server import aggregate, apply_delta
from fllsim.core.objective import contrastive_loss, make_views
from fllsim.core.resources import ResourceSample
from fllsim.core.tensor import Tape, add, backward, scale
from tests.conftest import IDENTITY_AUGMENT

PID = (1, "w")


def _update(cid, value, examples=1, failed=False, pid=PID):
    return ClientUpdate(
        client_id=cid,
        deltas={} if failed else {pid: np.array([value], dtype=np.float32)},
        num_examples=examples,
        resources=ResourceSample(),
        failed=failed,
    )


# ----------------------------------------------------------------------
# AGGREGATION
# ----------------------------------------------------------------------
def test_identical_deltas():
    applied = aggregate([_update(0, 0.25), _update(1, 0.25), _update(2, 0.25)], server_lr=1.0)
    assert applied[PID][0] == pytest.approx(0.25)


def test_opposite_deltas_cancel():
    assert aggregate([_update(0, 1.5), _update(1, -1.5)])[PID].tolist() == [0.0]


def test_example_weighted_mean():
    updates = [_update(0, 6.0, 1), _update(1, 3.0, 2), _update(2, 1.0, 3)]
    assert aggregate(updates, server_lr=1.0)[PID][0] == pytest.approx(2.5)


def test_server_learning_rate_scales():
    assert aggregate([_update(0, 2.0)], server_lr=0.5)[PID].tolist() == [1.0]


def test_order_does_not_matter():
    updates = [_update(0, 0.1, 3), _update(1, 0.7, 1), _update(2, -0.3, 2)]
    forward = aggregate(updates)[PID]
    backward_order = aggregate(list(reversed(updates)))[PID]
    assert forward.tobytes() == backward_order.tobytes()


def test_failed_updates_are_excluded():
    applied = aggregate([_update(0, 4.0), _update(1, 0.0, failed=True)])
    assert applied[PID].tolist() == [4.0]


def test_no_valid_update_skips_round():
    assert aggregate([_update(0, 0.0, failed=True)]) is None
    assert aggregate([]) is None


def test_zero_examples_weigh_equally():
    assert aggregate([_update(0, 1.0, 0), _update(1, 3.0, 0)])[PID].tolist() == [2.0]


def test_mismatched_keys_are_a_protocol_error():
    with pytest.raises(ProtocolError):
        aggregate([_update(0, 1.0), _update(1, 1.0, pid=(2, "w"))])


# ----------------------------------------------------------------------
# APPLY
# ----------------------------------------------------------------------
def test_apply_touches_only_the_delta_keys(tiny_encoder):
    before = {pid: t.data.copy() for pid, t in tiny_encoder.parameters().items()}
    pid = (2, "attn.out.bias")
    apply_delta(tiny_encoder, {pid: np.full(8, 0.5, np.float32)})
    for other, t in tiny_encoder.parameters().items():
        if other == pid:
            np.testing.assert_array_equal(t.data, before[pid] + 0.5)
        else:
            assert t.data.tobytes() == before[other].tobytes()


def test_apply_rejects_unknown_or_misshaped(tiny_encoder):
    with pytest.raises(ProtocolError):
        apply_delta(tiny_encoder, {(9, "nope"): np.zeros(1, np.float32)})
    with pytest.raises(ProtocolError):
        apply_delta(tiny_encoder, {(1, "attn.out.bias"): np.zeros(3, np.float32)})


# ----------------------------------------------------------------------
# FEDAVG ORACLE
# ----------------------------------------------------------------------
def test_full_participation_matches_centralized_step(tiny_encoder, tiny_train):
    settings = TrainSettings(batch_size=4, local_steps=1, client_lr=0.1, temperature=0.5, augment=IDENTITY_AUGMENT)
    partition = partition_iid(tiny_train.take(range(12)), 3, seed=0)
    plan = RoundPlan(
        round=0, phase=1, kept=(0, 1), trainable=(1,), tap_layer=1,
        clients=(0, 1, 2), client_seeds=(101, 202, 303),
    )
    global_model = tiny_encoder.copy()
    with ClientPool(tiny_train.images, settings) as pool:
        updates = pool.run(global_model.restrict(plan.kept, [1]), plan, partition)
    apply_delta(global_model, aggregate(updates, server_lr=1.0))

    # one SGD step on the mean of the clients' losses, same batches
    central = tiny_encoder.copy()
    set_trainable(central, 1)
    with Tape() as tape:
        losses = []
        for cid, seed in zip(plan.clients, plan.client_seeds):
            shard = tiny_train.images[partition.shard(cid)]
            rng = np.random.default_rng(seed)
            picked = rng.choice(len(shard), size=4, replace=False)
            batch = make_views(shard[picked], IDENTITY_AUGMENT, rng)
            losses.append(contrastive_loss(central, batch, plan.kept, 1, 0.5))
        total = scale(add(add(losses[0], losses[1]), losses[2]), 1.0 / 3.0)
        grads = backward(total, tape)

    params = global_model.parameters()
    for pid, t in central.parameters().items():
        expected = t.data - 0.1 * grads[pid] if pid in grads else t.data
        np.testing.assert_allclose(params[pid].data, expected, atol=1e-5)
