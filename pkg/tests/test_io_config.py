import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from red_pet import io
from red_pet.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from red_pet.dose import ScaleRecord
from red_pet.io import RSFError


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.sampled_from([io.KIND_IMAGE, io.KIND_SINOGRAM]),
       st.floats(1e-6, 1e6), st.floats(-10, 10))
def test_rsf_round_trip_is_exact(a, kind, scale, offset):
    blob = io.dumps_rsf(a, kind, ScaleRecord(scale, offset))
    b, k, rec = io.loads_rsf(blob)
    assert b.tobytes() == a.tobytes() and k == kind
    assert rec.scale == scale and rec.offset == offset
    assert io.dumps_rsf(b, k, rec) == blob


def test_rsf_file_round_trip(tmp_path):
    a = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    io.write_rsf(tmp_path / "d" / "a.rsf", a, io.KIND_SINOGRAM)
    b, kind, rec = io.read_rsf(tmp_path / "d" / "a.rsf")
    assert b.dtype == np.float32 and kind == io.KIND_SINOGRAM and rec == ScaleRecord()
    np.testing.assert_array_equal(b, a.astype(np.float32))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_rsf_detects_corruption(data):
    blob = bytearray(io.dumps_rsf(np.ones((3, 5)), io.KIND_IMAGE))
    # only the payload is checksummed; kind and scale record flips may stay valid
    region = data.draw(st.sampled_from([range(0, 4), range(8, 16), range(32, len(blob))]))
    i = data.draw(st.sampled_from(list(region)))
    blob[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(RSFError):
        io.loads_rsf(bytes(blob))


def test_rsf_rejects_bad_arrays():
    with pytest.raises(RSFError):
        io.dumps_rsf(np.ones((2, 2, 2)), io.KIND_IMAGE)
    with pytest.raises(RSFError):
        io.dumps_rsf(np.array([[np.nan]]), io.KIND_IMAGE)
    with pytest.raises(RSFError):
        io.dumps_rsf(np.ones((2, 2)), 7)
    with pytest.raises(RSFError):
        io.loads_rsf(b"RSF1")


def test_pgm_round_trip(tmp_path):
    a = np.linspace(0, 1, 20).reshape(4, 5)
    io.write_pgm16(tmp_path / "a.pgm", a)
    b = io.read_pgm16(tmp_path / "a.pgm")
    assert b.shape == (4, 5) and b[0, 0] == 0 and b[-1, -1] == 65535
    np.testing.assert_allclose(b / 65535, a, atol=1 / 65535)
    io.write_pgm16(tmp_path / "c.pgm", np.ones((2, 3)))
    assert not io.read_pgm16(tmp_path / "c.pgm").any()


def test_loss_csv_round_trip(tmp_path):
    trace = [(0, 1.5, 1.0, 0.5), (1, 0.1 + 0.2, 0.3, 0.0)]
    io.write_loss_csv(tmp_path / "l.csv", trace)
    assert io.read_loss_csv(tmp_path / "l.csv") == trace
    io.write_loss_csv(tmp_path / "e.csv", [])
    assert (tmp_path / "e.csv").read_text() == "step,loss_total,loss_mse,loss_ssim\n"


def test_config_defaults_and_overrides():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    cfg = parse_config("seed = 4  # comment\nschedule.t_s = 10\ndata.drfs = 4, 50\n"
                       "net.widths = 1, 8, 1\nablation.no_dc = yes\neval.methods = osem\n")
    assert cfg.seed == 4 and cfg.schedule.t_s == 10 and cfg.data.drfs == (4.0, 50.0)
    assert cfg.net.widths == (1, 8, 1) and cfg.ablation.no_dc and cfg.eval.methods == ("osem",)


@pytest.mark.parametrize("text", [
    "bogus = 1", "foo.bar = 1", "data.nope = 1", "seed", "seed = x", "schedule.t_s = 0",
    "schedule.t_s = 501", "schedule.beta = 2", "schedule.correction_sign = 0.5", "mixed.mode = x",
    "data.drfs = 0.5", "net.kernel = 2", "train.seed = 3", "workers = 0", "data.n_train = -1",
    "ablation.no_dc = maybe",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_dump_round_trip(tmp_path):
    cfg = parse_config("seed = 11\nout = x/y\nschedule.kind = cosine\nmixed.mode = supervised\n"
                       "eval.drfs = 20\ntrain.lr = 0.003\n")
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    (tmp_path / "c.cfg").write_text(text)
    assert load_config(tmp_path / "c.cfg") == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
