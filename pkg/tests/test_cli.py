import json
import math

import numpy as np
import pytest

from iftpp import cli
from iftpp import generators as gen
from iftpp.config import TrainConfig
from iftpp.data import EventSequence, read_jsonl, write_jsonl
from iftpp.encoder import Scaling
from iftpp.models import TPPModel, save_checkpoint

SMALL = {"K": 4, "H": 8, "D": 8, "seq_dim": 4, "batch_size": 8, "max_epochs": 3, "patience": 1}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, **kw):
    path.write_text(json.dumps({**SMALL, **kw}))
    return path


@pytest.fixture
def small_data(tmp_path, capsys):
    path = tmp_path / "sc.jsonl"
    code, _, _ = run(capsys, "generate", "self_correcting", "--n-seqs", 6, "--n-events", 40, "--out", path)
    assert code == 0
    return path


# ---------------------------------------------------------------- generate

def test_generate_reports_true_nll(tmp_path, capsys):
    path = tmp_path / "h.jsonl"
    code, out, _ = run(capsys, "generate", "hawkes1", "--n-seqs", 64, "--n-events", 1024, "--seed", 0,
                       "--out", path)
    assert code == 0
    report = json.loads(out)
    assert report["true_nll"] == pytest.approx(0.453, abs=0.03)
    assert len(read_jsonl(path)) == 64


def test_generate_rejects_bad_input(capsys):
    assert run(capsys, "generate", "poisson", "--n-events", 0)[0] == 2
    assert run(capsys, "generate", "hawkes", "--param", "mu=0.1", "--param", "alpha=[1.2]",
               "--param", "beta=[1.0]")[0] == 2
    assert run(capsys, "generate", "hawkes1", "--param", "mu")[0] == 2


def test_generate_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        run(capsys, "generate", "renewal", "--n-seqs", 3, "--n-events", 20, "--seed", 5, "--out", p)
    assert a.read_bytes() == b.read_bytes()


def test_generate_to_stdout_and_masking(capsys):
    code, out, _ = run(capsys, "generate", "hawkes1", "--n-seqs", 2, "--n-events", 100,
                       "--mask-fraction", "1/3")
    assert code == 0
    rows = [json.loads(line) for line in out.splitlines()]
    assert len(rows) == 2
    for row in rows:
        lo, hi = row["gap"]
        truth = np.array(row["ground_truth"])
        assert len(row["arrival_times"]) < len(truth)
        assert hi - lo >= truth[-1] / 3


# ---------------------------------------------------------------- train / evaluate

def test_train_then_evaluate_train_split(tmp_path, capsys, small_data):
    cfg = write_config(tmp_path / "c.json")
    ckpt = tmp_path / "m.npz"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", small_data, "--out-checkpoint", ckpt,
                       "--metrics", tmp_path / "m.csv")
    assert code == 0
    report = json.loads(out)
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--data", small_data, "--split", "train")
    assert code == 0
    assert json.loads(out)["nll_time"] == pytest.approx(report["train_nll"], abs=1e-9)
    assert "test_nll" in report


def test_training_metrics_are_reproducible(tmp_path, capsys, small_data):
    cfg = write_config(tmp_path / "c.json")
    csvs = []
    for k in range(2):
        run(capsys, "train", "--config", cfg, "--data", small_data, "--out-checkpoint", tmp_path / f"{k}.npz",
            "--metrics", tmp_path / f"{k}.csv")
        csvs.append((tmp_path / f"{k}.csv").read_text())
    assert csvs[0] == csvs[1]


def test_lognormmix_on_self_correcting_reaches_reference(tmp_path, capsys):
    data = tmp_path / "sc.jsonl"
    run(capsys, "generate", "self_correcting", "--n-seqs", 16, "--n-events", 256, "--out", data)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"batch_size": 16, "max_epochs": 100, "patience": 10}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", data, "--out-checkpoint", tmp_path / "m.npz")
    assert code == 0
    assert json.loads(out)["test_nll"] == pytest.approx(0.78, abs=0.1)


def test_fullynn_warns_about_deficient_density(tmp_path, capsys, small_data, caplog):
    cfg = write_config(tmp_path / "c.json", model="fullynn")
    code, _, _ = run(capsys, "train", "--config", cfg, "--data", small_data, "--out-checkpoint",
                     tmp_path / "m.npz")
    assert code == 0
    assert any("deficient" in r.getMessage() for r in caplog.records)


def test_config_errors_exit_2(tmp_path, capsys, small_data):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"modle": "lognormmix"}))
    code, _, _ = run(capsys, "train", "--config", bad, "--data", small_data, "--out-checkpoint",
                     tmp_path / "m.npz")
    assert code == 2


def test_malformed_jsonl_reports_line(tmp_path, capsys, caplog):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "arrival_times": [1, 2]}\n{"id": "b", "arrival_times": [2, 1]}\n')
    code, _, _ = run(capsys, "evaluate", "--data", path, "--true-model", "poisson")
    assert code == 2
    assert any("line 2" in r.getMessage() for r in caplog.records)


def test_true_model_oracle(tmp_path, capsys):
    spec = gen.preset("self_correcting", 4, 200, 1)
    seqs = gen.generate(spec)
    path = tmp_path / "d.jsonl"
    write_jsonl(path, seqs)
    code, out, _ = run(capsys, "evaluate", "--data", path, "--true-model", "self_correcting")
    assert code == 0
    assert json.loads(out)["nll_time"] == pytest.approx(gen.true_nll(spec, seqs), abs=1e-12)


def test_mark_aware_checkpoint_needs_marks(tmp_path, capsys):
    rng = np.random.default_rng(0)
    seqs = [EventSequence(np.cumsum(rng.exponential(size=30)), rng.integers(0, 3, 30), sequence_id=str(i))
            for i in range(6)]
    marked, plain = tmp_path / "marked.jsonl", tmp_path / "plain.jsonl"
    write_jsonl(marked, seqs)
    write_jsonl(plain, [EventSequence(s.arrival_times, sequence_id=s.sequence_id) for s in seqs])
    cfg = write_config(tmp_path / "c.json", marks=True)
    ckpt = tmp_path / "m.npz"
    assert run(capsys, "train", "--config", cfg, "--data", marked, "--out-checkpoint", ckpt)[0] == 0
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--data", marked)
    assert code == 0 and "mark_accuracy" in json.loads(out)
    assert run(capsys, "evaluate", "--checkpoint", ckpt, "--data", plain)[0] == 2


@pytest.mark.parametrize("kind", ["poisson", "renewal", "self_correcting", "hawkes1", "hawkes2"])
def test_round_trip_for_every_kind(tmp_path, capsys, kind):
    data = tmp_path / "d.jsonl"
    assert run(capsys, "generate", kind, "--n-seqs", 5, "--n-events", 30, "--out", data)[0] == 0
    cfg = write_config(tmp_path / "c.json", max_epochs=2)
    assert run(capsys, "train", "--config", cfg, "--data", data, "--out-checkpoint", tmp_path / "m.npz")[0] == 0
    code, out, _ = run(capsys, "evaluate", "--checkpoint", tmp_path / "m.npz", "--data", data)
    assert code == 0 and math.isfinite(json.loads(out)["nll_time"])


# ---------------------------------------------------------------- sample / intensity

def exponential_checkpoint(path, rate):
    cfg = TrainConfig(model="exponential", H=4)
    model = TPPModel(cfg, Scaling(0.0, 1.0, 2.0))
    for p in model.encoder.params.values():
        p.data[...] = 0.0
    model.decoder.params["v"].data[...] = 0.0
    # rate in original units is exp(b) / mean_tau
    model.decoder.params["b"].data[...] = math.log(rate * 2.0)
    save_checkpoint(path, model)


def test_sample_exponential_mean(tmp_path, capsys):
    ckpt = tmp_path / "e.npz"
    exponential_checkpoint(ckpt, 2.5)
    code, out, _ = run(capsys, "sample", "--checkpoint", ckpt, "--n", 100000, "--seed", 1)
    assert code == 0
    draws = np.array(json.loads(out))
    assert draws.mean() == pytest.approx(1 / 2.5, rel=0.02)
    again = run(capsys, "sample", "--checkpoint", ckpt, "--n", 100000, "--seed", 1)[1]
    assert again == out


def test_sample_sequence_rollout(tmp_path, capsys):
    ckpt = tmp_path / "e.npz"
    exponential_checkpoint(ckpt, 1.0)
    code, out, _ = run(capsys, "sample", "--checkpoint", ckpt, "--n", 5, "--sequence")
    assert code == 0 and len(json.loads(out)["inter_times"]) == 5


def test_exponential_intensity_is_flat(tmp_path, capsys):
    ckpt = tmp_path / "e.npz"
    exponential_checkpoint(ckpt, 0.7)
    hist = tmp_path / "h.jsonl"
    write_jsonl(hist, [EventSequence(np.array([0.5, 1.0, 4.0]), sequence_id="x")])
    code, out, _ = run(capsys, "intensity", "--checkpoint", ckpt, "--history-file", hist, "--grid", "0.1:5:20")
    assert code == 0
    rows = np.array([[float(v) for v in line.split(",")] for line in out.splitlines()[1:]])
    np.testing.assert_allclose(rows[:, 1], 0.7, rtol=1e-12)
    # the CSV carries ten significant digits
    np.testing.assert_allclose(rows[:, 2], 0.7 * np.exp(-0.7 * rows[:, 0]), rtol=1e-8)


def test_bimodal_pdf_grid(tmp_path, capsys):
    # a history-free mixture head pinned to the two-regime gap law
    sc = Scaling(-0.3, 1.4, 1.0)
    model = TPPModel(TrainConfig(model="lognormmix", K=2, H=4, history=False), sc)
    head = model.decoder.head
    for t in (head.V_w, head.V_mu, head.V_s):
        t.data[...] = 0.0
    head.b_w.data[...] = 0.0
    head.b_mu.data[...] = (np.array([-1.5, 1.0]) - sc.log_mean) / sc.log_std
    head.b_s.data[...] = np.log(np.array([0.4, 0.4]) / sc.log_std)
    ckpt = tmp_path / "mix.npz"
    save_checkpoint(ckpt, model)
    hist = tmp_path / "h.jsonl"
    write_jsonl(hist, [EventSequence(np.array([1.0]))])
    code, out, _ = run(capsys, "intensity", "--checkpoint", ckpt, "--history-file", hist, "--grid", "0.02:8:400")
    assert code == 0
    rows = np.array([[float(v) for v in line.split(",")] for line in out.splitlines()[1:]])
    tau, pdf = rows[:, 0], rows[:, 2]
    ref = sum(0.5 * np.exp(-0.5 * ((np.log(tau) - m) / 0.4) ** 2) / (0.4 * tau * np.sqrt(2 * np.pi))
              for m in (-1.5, 1.0))
    np.testing.assert_allclose(pdf, ref, rtol=1e-8)
    peaks = np.flatnonzero((pdf[1:-1] > pdf[:-2]) & (pdf[1:-1] > pdf[2:]))
    assert len(peaks) == 2


def test_intensity_grid_validation(tmp_path, capsys):
    ckpt = tmp_path / "e.npz"
    exponential_checkpoint(ckpt, 1.0)
    hist = tmp_path / "h.jsonl"
    write_jsonl(hist, [EventSequence(np.array([1.0]))])
    assert run(capsys, "intensity", "--checkpoint", ckpt, "--history-file", hist, "--grid", "0:1:5")[0] == 2


# ---------------------------------------------------------------- impute / embed

def test_impute_zero_gap_strategies_agree(tmp_path, capsys):
    seq = gen.generate(gen.preset("hawkes1", 1, 40, 0))[0]
    t_end = float(seq.arrival_times[-1])
    seq.extra["gap"] = [t_end, t_end]
    seq.extra["ground_truth"] = seq.arrival_times.tolist()
    data = tmp_path / "g.jsonl"
    write_jsonl(data, [seq])
    cfg = write_config(tmp_path / "c.json", mc_samples=2)
    code, out, _ = run(capsys, "impute", "--data", data, "--config", cfg, "--steps", 3)
    assert code == 0
    report = json.loads(out)
    vals = [report[s]["ground_truth_nll"] for s in ("none", "mean", "reparam")]
    assert max(vals) - min(vals) < 1e-6


def test_impute_requires_gap(tmp_path, capsys, small_data):
    cfg = write_config(tmp_path / "c.json")
    assert run(capsys, "impute", "--data", small_data, "--config", cfg)[0] == 2


def test_embed_exports_rows(tmp_path, capsys):
    data = tmp_path / "one.jsonl"
    write_jsonl(data, gen.generate(gen.preset("renewal", 1, 60, 0)))
    cfg = write_config(tmp_path / "c.json", sequence_embedding=True)
    ckpt = tmp_path / "m.npz"
    assert run(capsys, "train", "--config", cfg, "--data", data, "--out-checkpoint", ckpt)[0] == 0
    code, out, _ = run(capsys, "embed", "--checkpoint", ckpt, "--out", tmp_path / "e.csv")
    assert code == 0
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("renewal-0,")
    assert len(lines[1].split(",")) == 1 + SMALL["seq_dim"]


def test_embed_without_embeddings_fails(tmp_path, capsys):
    ckpt = tmp_path / "e.npz"
    exponential_checkpoint(ckpt, 1.0)
    assert run(capsys, "embed", "--checkpoint", ckpt, "--out", tmp_path / "e.csv")[0] == 2


def test_interpolated_embedding_sits_between_endpoints(tmp_path, capsys):
    seqs = (gen.generate(gen.preset("renewal", 8, 256, 0))
            + gen.generate(gen.preset("self_correcting", 8, 256, 0)))
    data = tmp_path / "mix.jsonl"
    write_jsonl(data, seqs)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sequence_embedding": True, "pretrain_epochs": 20, "batch_size": 16,
                               "max_epochs": 100, "patience": 10}))
    ckpt = tmp_path / "m.npz"
    assert run(capsys, "train", "--config", cfg, "--data", data, "--out-checkpoint", ckpt)[0] == 0
    spread = {}
    for w in (0.0, 0.5, 1.0):
        code, out, _ = run(capsys, "sample", "--checkpoint", ckpt, "--interpolate", "self_correcting-0",
                           "renewal-0", "--weight", w, "--n", 3000, "--sequence", "--seed", 1)
        assert code == 0
        # spread of log gaps: the plain CV of heavy-tailed renewal gaps is too noisy at this size
        spread[w] = np.log(json.loads(out)["inter_times"]).std()
    assert spread[0.0] + 0.1 < spread[0.5] < spread[1.0] - 0.1
