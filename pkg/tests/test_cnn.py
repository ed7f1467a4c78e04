import numpy as np
import pytest

from seqfn.cnn import CnnSpec, conv_features, forward_cnn, init_cnn
from seqfn.data import PAD, encode, pad_batch
from seqfn.errors import ShapeError
from seqfn.gradcheck import check_params

SMALL = CnnSpec(embed_dim=8, filters=(3, 4, 5, 6))


def test_default_layout():
    spec = CnnSpec()
    assert spec.filters == (32, 64, 96, 128)
    assert spec.kernels == (6, 8, 10, 12)
    feats = conv_features(np.array(encode("MKVLAGHWY").ids), init_cnn(spec, 0))
    assert [f.shape[-1] for f in feats] == [32, 64, 96, 128]
    assert all(f.shape[0] == 11 for f in feats)


def test_spec_validation():
    with pytest.raises(ValueError):
        CnnSpec(filters=(1, 2), kernels=(3,))
    with pytest.raises(ValueError):
        CnnSpec(filters=(0, 1), kernels=(3, 3))
    assert CnnSpec.from_dict(CnnSpec().to_dict()) == CnnSpec()


@pytest.mark.parametrize("seq", ["M", "MK", "MKVLAGHWYTREWQ" * 5])
def test_scalar_output(seq):
    out = forward_cnn(np.array(encode(seq).ids), init_cnn(CnnSpec(), 0))
    assert out.shape == ()


def test_batch_matches_single():
    params = init_cnn(SMALL, 1)
    seqs = [encode("MKV"), encode("GAVLIWKKR")]
    ids, mask = pad_batch(seqs)
    batched = forward_cnn(ids, params, mask).data
    for i, s in enumerate(seqs):
        assert batched[i] == pytest.approx(forward_cnn(np.array(s.ids), params).item(), abs=1e-12)


def test_shift_probe():
    params = init_cnn(CnnSpec(), 2)
    motif = list(encode("WKYHM").ids[1:-1])
    left = np.array([PAD] * 3 + motif + [PAD] * 12)
    right = np.array([PAD] * 10 + motif + [PAD] * 5)
    fl = conv_features(left, params, left != PAD)[-1].data
    fr = conv_features(right, params, right != PAD)[-1].data
    np.testing.assert_allclose(fl[3:8], fr[10:15], atol=1e-12)
    assert forward_cnn(left, params).item() == pytest.approx(forward_cnn(right, params).item(), abs=1e-12)


def test_deterministic():
    a, b = init_cnn(CnnSpec(), 5), init_cnn(CnnSpec(), 5)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_empty_sequence():
    with pytest.raises(ShapeError):
        forward_cnn(np.array([], dtype=np.int64), init_cnn(SMALL, 0))
    with pytest.raises(ShapeError):
        forward_cnn(np.array([PAD, PAD]), init_cnn(SMALL, 0))


def test_gradients_small():
    params = init_cnn(SMALL, 3)
    rng = np.random.default_rng(3)
    for name, t in params.items():
        if name.endswith("bias"):
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)
    ids, mask = pad_batch([encode("MKVLAGH"), encode("WYTR")])
    w = rng.standard_normal(2)
    errors = check_params(lambda: (forward_cnn(ids, params, mask) * w).sum(), dict(params.items()))
    assert max(errors.values()) < 1e-4, errors
