"""Command-line surface: exit codes, partial-failure handling, config
precedence, and byte-level reproducibility."""

import numpy as np
import pytest

from envfuse import audio, cli
from envfuse.bundle import gen_synthetic_bundle, save_bundle
from envfuse.fusion import PipelineParams


def _gen(tmp_path, name, count=3, m=16, d=8, seed=0, scenario="mixed"):
    out = tmp_path / name
    rc = cli.main([
        "gen-fixtures", "--out", str(out), "--count", str(count),
        "--seed", str(seed), "--m", str(m), "--d", str(d), "--scenario", scenario,
    ])
    assert rc == 0
    return out


def _decay_wav(path, t60, seed, sr=16000):
    n = int(1.5 * t60 * sr)
    t = np.arange(n) / sr
    noise = np.random.default_rng(seed).uniform(-1, 1, n)
    w = audio.Waveform(samples=0.8 * noise * 10.0 ** (-3.0 * t / t60), sample_rate=sr)
    audio.write_wav(path, w)


def test_gen_fixtures_deterministic(tmp_path, capsys):
    a = _gen(tmp_path, "a")
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed == sorted(printed)
    b = _gen(tmp_path, "b")
    files_a = sorted(p.name for p in a.iterdir())
    files_b = sorted(p.name for p in b.iterdir())
    assert files_a == files_b and len(files_a) == 3
    for name in files_a:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_fuse_happy_path(tmp_path, capsys):
    fixtures = _gen(tmp_path, "fx")
    out = tmp_path / "emb"
    csv_path = tmp_path / "emb.csv"
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(out),
        "--csv", str(csv_path), "--topk", "5", "--d-model", "4",
    ])
    assert rc == 0
    produced = sorted(out.glob("*.f32"))
    assert len(produced) == 3
    assert all(p.name.endswith(".shared.k5.f32") for p in produced)
    lines = [l for l in capsys.readouterr().out.strip().splitlines() if ": k=" in l]
    ids = [l.split(":")[0] for l in lines]
    assert ids == sorted(ids)
    assert csv_path.exists()
    assert len(csv_path.read_text().strip().splitlines()) == 3


def test_fuse_partial_failure_names_culprit(tmp_path, capsys):
    fixtures = _gen(tmp_path, "fx")
    paths = sorted(fixtures.iterdir())
    corrupt = paths[1]
    corrupt.write_bytes(corrupt.read_bytes()[:-10])
    out = tmp_path / "emb"
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(out),
        "--topk", "5", "--d-model", "4",
    ])
    assert rc == 1
    assert len(list(out.glob("*.f32"))) == 2
    err = capsys.readouterr().err
    assert corrupt.name in err and "error:" in err


def test_fuse_byte_identical_reruns(tmp_path):
    fixtures = _gen(tmp_path, "fx")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = cli.main([
            "fuse", "--bundle-dir", str(fixtures), "--out", str(out),
            "--topk", "4", "--d-model", "4", "--seed", "11",
        ])
        assert rc == 0
        outs.append(out)
    for p in sorted(outs[0].glob("*.f32")):
        assert p.read_bytes() == (outs[1] / p.name).read_bytes()


def test_fuse_with_checkpoint(tmp_path):
    fixtures = _gen(tmp_path, "fx")
    ckpt = tmp_path / "pipe.m2ck"
    PipelineParams.init(np.random.default_rng(3), d=8, d_model=4).save(ckpt)
    out = tmp_path / "emb"
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(out),
        "--checkpoint", str(ckpt), "--topk", "4",
    ])
    assert rc == 0
    assert len(list(out.glob("*.f32"))) == 3
    # wrong feature dimension is a usage error
    wrong = _gen(tmp_path, "fx12", d=12)
    rc = cli.main([
        "fuse", "--bundle-dir", str(wrong), "--out", str(tmp_path / "emb2"),
        "--checkpoint", str(ckpt), "--topk", "4",
    ])
    assert rc == 2


def test_fuse_requires_inputs(tmp_path, capsys):
    rc = cli.main(["fuse", "--out", str(tmp_path / "emb")])
    assert rc == 2
    assert "no bundle" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    fixtures = _gen(tmp_path, "fx")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sweep defaults\ntopk = 5\nd_model = 4\nmode = shared\n")
    out1 = tmp_path / "cfgonly"
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(out1), "--config", str(cfg),
    ])
    assert rc == 0
    assert all(p.name.endswith(".k5.f32") for p in out1.glob("*.f32"))
    # explicit flag beats the file
    out2 = tmp_path / "flagwins"
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(out2),
        "--config", str(cfg), "--topk", "7",
    ])
    assert rc == 0
    assert all(p.name.endswith(".k7.f32") for p in out2.glob("*.f32"))


def test_config_errors(tmp_path, capsys):
    fixtures = _gen(tmp_path, "fx")
    bad = tmp_path / "bad.cfg"
    bad.write_text("widgets = 3\n")
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(tmp_path / "x"),
        "--config", str(bad),
    ])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err
    bad.write_text("just some words\n")
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(tmp_path / "x"),
        "--config", str(bad),
    ])
    assert rc == 2
    # invalid flag value caught by RunConfig.validate
    rc = cli.main([
        "fuse", "--bundle-dir", str(fixtures), "--out", str(tmp_path / "x"),
        "--topk", "0",
    ])
    assert rc == 2


def test_sweep_structure(tmp_path):
    fixtures = _gen(tmp_path, "fx", count=2, m=16, d=8, scenario="planted")
    out = tmp_path / "sweep.csv"
    rc = cli.main([
        "topk-sweep", "--bundles", str(fixtures), "--out", str(out),
        "--k-list", "2,4,8", "--d-model", "4",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "k,mode,mean_hv_distance_to_kmax,mean_selected_mass"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 6  # 3 k values x 2 modes
    assert [(int(r[0]), r[1]) for r in rows] == [
        (2, "shared"), (2, "unshared"), (4, "shared"),
        (4, "unshared"), (8, "shared"), (8, "unshared"),
    ]
    for mode in ("shared", "unshared"):
        masses = [float(r[3]) for r in rows if r[1] == mode]
        assert np.all(np.diff(masses) >= -1e-12)
        # distance to the k_ref embedding is zero at k_ref itself
        dist_at_ref = [float(r[2]) for r in rows if r[1] == mode and r[0] == "8"]
        assert dist_at_ref == [0.0]
    # the two modes disagree somewhere below k_ref
    shared = {r[0]: float(r[2]) for r in rows if r[1] == "shared"}
    unshared = {r[0]: float(r[2]) for r in rows if r[1] == "unshared"}
    assert any(abs(shared[k] - unshared[k]) > 1e-9 for k in ("2", "4"))


def test_sweep_rejects_bad_k(tmp_path, capsys):
    fixtures = _gen(tmp_path, "fx", count=1, m=8, d=8)
    rc = cli.main([
        "topk-sweep", "--bundles", str(fixtures), "--out", str(tmp_path / "s.csv"),
        "--k-list", "2,99", "--d-model", "4",
    ])
    assert rc == 2
    assert "outside" in capsys.readouterr().err


def test_eval_identical_dirs(tmp_path, capsys):
    ref = tmp_path / "ref"
    syn = tmp_path / "syn"
    ref.mkdir()
    syn.mkdir()
    for i, t60 in enumerate((0.3, 0.5)):
        _decay_wav(ref / f"room{i}.wav", t60, seed=i)
        (syn / f"room{i}.wav").write_bytes((ref / f"room{i}.wav").read_bytes())
    out = tmp_path / "report.csv"
    rc = cli.main(["eval", "--ref", str(ref), "--syn", str(syn), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "sample_id,rt60_ref,rt60_syn,rte,mcd"
    assert len(lines) == 4  # two rows + MEAN
    for line in lines[1:3]:
        cells = line.split(",")
        assert float(cells[3]) == 0.0  # rte
        assert float(cells[4]) == 0.0  # mcd
    assert lines[3].startswith("MEAN,")
    assert "2 pairs evaluated" in capsys.readouterr().out


def test_eval_flags_unpaired_and_skipped(tmp_path, capsys):
    ref = tmp_path / "ref"
    syn = tmp_path / "syn"
    ref.mkdir()
    syn.mkdir()
    _decay_wav(ref / "a.wav", 0.4, seed=0)
    (syn / "a.wav").write_bytes((ref / "a.wav").read_bytes())
    _decay_wav(ref / "only_ref.wav", 0.4, seed=1)
    # stationary noise defeats the decay estimator -> skipped pair
    flat = audio.Waveform(samples=np.random.default_rng(2).uniform(-0.5, 0.5, 8000))
    audio.write_wav(ref / "flat.wav", flat)
    audio.write_wav(syn / "flat.wav", flat)
    out = tmp_path / "report.csv"
    rc = cli.main(["eval", "--ref", str(ref), "--syn", str(syn), "--out", str(out)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "unpaired: only_ref" in err
    assert "skipped: flat" in err
    assert len(out.read_text().strip().splitlines()) == 3  # header + a + MEAN


def test_eval_no_pairs_is_usage_error(tmp_path, capsys):
    ref = tmp_path / "ref"
    syn = tmp_path / "syn"
    ref.mkdir()
    syn.mkdir()
    rc = cli.main(["eval", "--ref", str(ref), "--syn", str(syn),
                   "--out", str(tmp_path / "r.csv")])
    assert rc == 2


def test_mel_command(tmp_path, capsys):
    wav_path = tmp_path / "tone.wav"
    t = np.arange(8000) / 16000
    audio.write_wav(wav_path, audio.Waveform(samples=0.5 * np.sin(2 * np.pi * 440 * t)))
    out = tmp_path / "tone.mel"
    rc = cli.main(["mel", str(wav_path), "--out", str(out)])
    assert rc == 0
    mel = audio.load_mel(out)
    assert mel.frames.shape == (audio.frame_count(8000), audio.N_MELS)


def test_train_and_synth_round_trip(tmp_path):
    ckpt = tmp_path / "toy.m2ck"
    loss_csv = tmp_path / "loss.csv"
    rc = cli.main([
        "train-toy", "--out", str(ckpt), "--loss-csv", str(loss_csv),
        "--steps", "12", "--samples", "6", "--t-max", "20", "--seed", "5",
    ])
    assert rc == 0
    assert ckpt.exists()
    assert len(loss_csv.read_text().strip().splitlines()) == 13  # header + steps

    mels = []
    wavs = []
    for name in ("s1", "s2"):
        mel_path = tmp_path / f"{name}.mel"
        wav_path = tmp_path / f"{name}.wav"
        rc = cli.main([
            "synth-toy", "--checkpoint", str(ckpt), "--out", str(mel_path),
            "--wav", str(wav_path), "--frames", "8", "--iterations", "4",
            "--seed", "3", "--bundle-seed", "1",
        ])
        assert rc == 0
        mels.append(mel_path.read_bytes())
        wavs.append(wav_path.read_bytes())
    assert mels[0] == mels[1]
    assert wavs[0] == wavs[1]


def test_synth_accepts_bundle_file(tmp_path):
    ckpt = tmp_path / "toy.m2ck"
    rc = cli.main([
        "train-toy", "--out", str(ckpt), "--steps", "5", "--samples", "4",
        "--t-max", "20",
    ])
    assert rc == 0
    b = gen_synthetic_bundle(42, 8, 6, "planted")
    bundle_path = tmp_path / "cond.m2fb"
    save_bundle(b, bundle_path)
    mel_path = tmp_path / "cond.mel"
    rc = cli.main([
        "synth-toy", "--checkpoint", str(ckpt), "--bundle", str(bundle_path),
        "--out", str(mel_path), "--frames", "4",
    ])
    assert rc == 0
    assert mel_path.exists()


def test_synth_bad_checkpoint_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.m2ck"
    rc = cli.main([
        "synth-toy", "--checkpoint", str(missing), "--out", str(tmp_path / "x.mel"),
    ])
    assert rc == 2
    assert "checkpoint" in capsys.readouterr().err


def test_train_toy_validates_dims(tmp_path, capsys):
    rc = cli.main([
        "train-toy", "--out", str(tmp_path / "t.m2ck"), "--steps", "2",
        "--topk", "99", "--m", "8", "--t-max", "20",
    ])
    assert rc == 2
    assert "exceeds patch count" in capsys.readouterr().err


def test_inspect_recognizes_all_formats(tmp_path, capsys):
    fixtures = _gen(tmp_path, "fx", count=1, m=8, d=8, scenario="uniform")
    bundle_path = next(fixtures.iterdir())
    ckpt = tmp_path / "p.m2ck"
    PipelineParams.init(np.random.default_rng(0), d=8, d_model=4).save(ckpt)
    wav_path = tmp_path / "w.wav"
    _decay_wav(wav_path, 0.3, seed=0)
    mel_path = tmp_path / "m.mel"
    audio.save_mel(mel_path, audio.mel_spectrogram(audio.read_wav(wav_path)))

    rc = cli.main(["inspect", str(bundle_path), str(ckpt), str(mel_path), str(wav_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "feature bundle" in out
    assert "checkpoint with" in out
    assert "mel export" in out
    assert "wav 16000 Hz" in out


def test_inspect_unknown_format(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00\x01\x02\x03 junk")
    rc = cli.main(["inspect", str(junk)])
    assert rc == 1
    assert "unrecognized" in capsys.readouterr().err
