import numpy as np
import pytest

from pkgx.checkpoint import Checkpoint, check_env, env_signature, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from pkgx.env import WalkEnv
from pkgx.errors import CheckpointError
from pkgx.kg import Hypothesis, load_triples
from pkgx.policy import action_distribution, init_params


def _ckpt(env, seed=0):
    params = init_params(env, d=6, h=5, seed=seed)
    rng = np.random.default_rng(seed)
    for v in params.arrays().values():
        v[...] = rng.normal(size=v.shape)
    return Checkpoint(params, 17, 0.62, 0.5, {"d": 6, "h": 5}, env_signature(env))


def test_roundtrip_is_bit_exact(planted, tmp_path):
    env = WalkEnv(planted.kg)
    ck = _ckpt(env)
    path = tmp_path / "m.pkgx-ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert (back.train_step, back.tau, back.val_mrr, back.config) == (17, 0.62, 0.5, {"d": 6, "h": 5})
    check_env(back, env)
    for h in planted.test[:5]:
        st = env.reset(h)
        for _ in range(env.t_max):
            acts = env.valid_actions(st, training=False)
            p0 = action_distribution(ck.params, env, st, acts, training=False)
            p1 = action_distribution(back.params, env, st, acts, training=False)
            assert p0.tobytes() == p1.tobytes()
            st = env.step(st, acts[int(np.argmax(p0))], training=False)


def test_truncated_file_rejected(toy_env, tmp_path):
    blob = to_bytes(_ckpt(toy_env))
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        from_bytes(blob[:8])


def test_corrupted_payload_rejected(toy_env):
    blob = bytearray(to_bytes(_ckpt(toy_env)))
    blob[-20] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(blob))


def test_old_version_header_rejected(toy_env):
    blob = to_bytes(_ckpt(toy_env)).replace(b"PKGX-CKPT v1", b"PKGX-CKPT v0", 1)
    with pytest.raises(CheckpointError, match="v0"):
        from_bytes(blob)


def test_env_mismatch_rejected(toy_env):
    ck = _ckpt(toy_env)
    other = WalkEnv(load_triples(["a\tr\tb", "b\tq\tc"]), t_max=3, inverse_edges=False)
    with pytest.raises(CheckpointError):
        check_env(ck, other)


def test_missing_file_is_user_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.pkgx-ckpt")
