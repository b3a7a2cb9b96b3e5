"""Batch command-line surface.

Every command funnels randomness through one seeded generator, sorts its
outputs by sample id, and is byte-for-byte reproducible given identical
inputs, config, and seed.

Exit codes: 0 full success, 1 partial failure (some inputs failed, the rest
were processed), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import audio, bundle, diffusion, fusion, metrics
from .bundle import BundleError, FeatureBundle, gen_synthetic_bundle, load_bundle
from .checkpoint import CheckpointError, load_checkpoint
from .nn import DimensionError

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

SEED_MASK = 0xFFFFFFFF


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    topk: int = 140
    mode: str = "shared"
    lambda1: float = 0.5
    lambda2: float = 0.5
    d_model: int = 512
    heads_detector: int = 2
    heads_other: int = 4
    sample_rate: int = 16000
    seed: int = 0

    def validate(self) -> None:
        if self.topk < 1:
            raise ConfigError(f"topk must be >= 1, got {self.topk}")
        if self.mode not in fusion.MODES:
            raise ConfigError(f"mode must be one of {fusion.MODES}, got {self.mode!r}")
        if self.d_model % self.heads_detector or self.d_model % self.heads_other:
            raise ConfigError(
                f"head counts ({self.heads_detector}, {self.heads_other}) "
                f"must divide d_model ({self.d_model})"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' comments and blank lines are ignored."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        caster = {"int": int, "float": float, "str": str}[_CONFIG_TYPES[key]]
        try:
            values[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            setattr(cfg, key, value)
    for name in _CONFIG_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            setattr(cfg, name, flag)
    cfg.validate()
    return cfg


def _load_or_init_params(checkpoint, cfg: RunConfig, d: int) -> fusion.PipelineParams:
    if checkpoint:
        params = fusion.PipelineParams.load(checkpoint)
        if params.d != d:
            raise DimensionError(
                f"checkpoint expects feature dim {params.d}, bundles have {d}"
            )
        return params
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & SEED_MASK, 0]))
    return fusion.PipelineParams.init(
        rng,
        d=d,
        d_model=cfg.d_model,
        heads_detector=cfg.heads_detector,
        heads_other=cfg.heads_other,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
    )


def _collect_bundle_paths(paths: list[str], directory: str | None) -> list[Path]:
    out = [Path(p) for p in paths]
    if directory:
        out += sorted(Path(directory).glob(f"*{bundle.FILE_EXTENSION}"))
    return out


def cmd_gen_fixtures(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenarios = (
        list(bundle.SCENARIOS) if args.scenario == "mixed" else [args.scenario]
    )
    written = []
    for i in range(args.count):
        scenario = scenarios[i % len(scenarios)]
        b = gen_synthetic_bundle(args.seed + i, args.m, args.d, scenario)
        dest = out_dir / f"{b.sample_id}{bundle.FILE_EXTENSION}"
        bundle.save_bundle(b, dest)
        written.append(dest)
    for dest in sorted(written):
        print(dest)
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    paths = _collect_bundle_paths(args.bundles, args.bundle_dir)
    if not paths:
        print("error: no bundle files given", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    loaded: list[FeatureBundle] = []
    failures: list[tuple[Path, str]] = []
    for path in paths:
        try:
            loaded.append(load_bundle(path))
        except (BundleError, OSError) as exc:
            failures.append((path, str(exc)))

    params = None
    embeddings = []
    if loaded:
        try:
            params = _load_or_init_params(args.checkpoint, cfg, loaded[0].d)
        except (CheckpointError, DimensionError, OSError) as exc:
            print(f"error: checkpoint: {exc}", file=sys.stderr)
            return EXIT_USAGE
        for b in sorted(loaded, key=lambda x: x.sample_id):
            try:
                emb, trace = fusion.compute_environment_embedding(
                    b, params, k=cfg.topk, mode=cfg.mode
                )
            except (DimensionError, ValueError) as exc:
                failures.append((Path(b.sample_id), str(exc)))
                continue
            dest = fusion.export_path_for(b.sample_id, out_dir, cfg.mode, cfg.topk)
            fusion.save_embedding_f32(dest, emb)
            embeddings.append(emb)
            mass = float(trace.patch_attention[trace.indices_rgb].sum())
            print(
                f"{b.sample_id}: k={cfg.topk} mode={cfg.mode} "
                f"|h_v|={np.linalg.norm(emb.vector):.6f} selected_mass={mass:.6f}"
            )
    if args.csv and embeddings:
        fusion.write_embeddings_csv(args.csv, embeddings)
    for path, msg in failures:
        print(f"error: {path}: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


DEFAULT_SWEEP_KS = tuple(range(20, 241, 20))


def cmd_topk_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    paths = _collect_bundle_paths([], args.bundles)
    if not paths:
        print(f"error: no bundles in {args.bundles}", file=sys.stderr)
        return EXIT_USAGE
    bundles = sorted((load_bundle(p) for p in paths), key=lambda b: b.sample_id)
    if args.k_list:
        try:
            k_values = sorted({int(v) for v in args.k_list.split(",")})
        except ValueError:
            print(f"error: bad --k-list {args.k_list!r}", file=sys.stderr)
            return EXIT_USAGE
    else:
        k_values = list(DEFAULT_SWEEP_KS)
    m = bundles[0].m
    bad = [k for k in k_values if not 1 <= k <= m]
    if bad:
        print(f"error: k values {bad} outside [1, {m}]", file=sys.stderr)
        return EXIT_USAGE
    try:
        params = _load_or_init_params(args.checkpoint, cfg, bundles[0].d)
    except (CheckpointError, DimensionError, OSError) as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE

    k_ref = max(k_values)
    rows = []
    for mode in fusion.MODES:
        reference = {
            b.sample_id: fusion.compute_environment_embedding(b, params, k_ref, mode)[0].vector
            for b in bundles
        }
        for k in k_values:
            distances = []
            masses = []
            for b in bundles:
                emb, trace = fusion.compute_environment_embedding(b, params, k, mode)
                distances.append(np.linalg.norm(emb.vector - reference[b.sample_id]))
                masses.append(trace.patch_attention[trace.indices_rgb].sum())
            rows.append((k, mode, float(np.mean(distances)), float(np.mean(masses))))

    rows.sort(key=lambda r: (r[0], r[1]))
    import csv as _csv

    with open(args.out, "w", newline="") as fp:
        writer = _csv.writer(fp)
        writer.writerow(["k", "mode", "mean_hv_distance_to_kmax", "mean_selected_mass"])
        for k, mode, dist, mass in rows:
            writer.writerow([k, mode, f"{dist:.8e}", f"{mass:.8e}"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ref_dir, syn_dir = Path(args.ref), Path(args.syn)
    ref_files = {p.stem: p for p in audio.wav_paths(ref_dir)}
    syn_files = {p.stem: p for p in audio.wav_paths(syn_dir)}
    paired = sorted(set(ref_files) & set(syn_files))
    report = metrics.MetricReport()
    report.unpaired = sorted(set(ref_files) ^ set(syn_files))
    if not paired:
        print("error: no paired wav files found", file=sys.stderr)
        return EXIT_USAGE
    if args.sample_count and args.sample_count < len(paired):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & SEED_MASK, 9]))
        chosen = rng.permutation(len(paired))[: args.sample_count]
        paired = sorted(paired[int(i)] for i in chosen)

    for stem in paired:
        try:
            ref_wav = audio.read_wav(ref_files[stem])
            syn_wav = audio.read_wav(syn_files[stem])
            rt_ref = metrics.schroeder_rt60(ref_wav)
            rt_syn = metrics.schroeder_rt60(syn_wav)
            value_mcd = metrics.mcd(
                audio.mel_spectrogram(ref_wav), audio.mel_spectrogram(syn_wav)
            )
        except (metrics.EstimationFailure, audio.AudioError, ValueError) as exc:
            report.skipped.append((stem, str(exc)))
            continue
        report.rows.append(
            metrics.MetricRow(
                sample_id=stem,
                rt60_ref=rt_ref,
                rt60_syn=rt_syn,
                rte=abs(rt_syn - rt_ref),
                mcd=value_mcd,
            )
        )
    report.write_csv(args.out)
    print(
        f"{len(report.rows)} pairs evaluated; mean RTE {report.mean_rte:.6f} s; "
        f"mean MCD {report.mean_mcd:.6f} dB"
    )
    for stem, reason in report.skipped:
        print(f"skipped: {stem}: {reason}", file=sys.stderr)
    for stem in report.unpaired:
        print(f"unpaired: {stem}", file=sys.stderr)
    return EXIT_PARTIAL if (report.skipped or report.unpaired) else EXIT_OK


def cmd_mel(args: argparse.Namespace) -> int:
    wav = audio.read_wav(args.wav)
    mel = audio.mel_spectrogram(wav)
    audio.save_mel(args.out, mel)
    print(f"{args.wav}: {mel.frames.shape[0]} frames x {mel.n_mels} bands -> {args.out}")
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace) -> int:
    if args.d_model % args.heads_detector or args.d_model % args.heads_other:
        print("error: head counts must divide d_model", file=sys.stderr)
        return EXIT_USAGE
    if args.topk > args.m:
        print(f"error: topk {args.topk} exceeds patch count {args.m}", file=sys.stderr)
        return EXIT_USAGE
    dataset = diffusion.make_toy_dataset(args.samples, args.seed, args.m, args.d, args.patch)
    rng_p = np.random.default_rng(np.random.SeedSequence([args.seed & SEED_MASK, 4]))
    pipeline = fusion.PipelineParams.init(
        rng_p,
        d=args.d,
        d_model=args.d_model,
        heads_detector=args.heads_detector,
        heads_other=args.heads_other,
    )
    rng_d = np.random.default_rng(np.random.SeedSequence([args.seed & SEED_MASK, 5]))
    denoiser = diffusion.DenoiserParams.init(
        rng_d, d_model=args.d_model, patch_size=args.patch, d_h=args.d_h, t_max=args.t_max
    )
    schedule = diffusion.build_schedule(args.t_max)
    try:
        losses = diffusion.train_toy(
            dataset,
            pipeline,
            denoiser,
            schedule,
            steps=args.steps,
            learning_rate=args.lr,
            seed=args.seed,
            k=args.topk,
            mode=args.mode,
        )
    except diffusion.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    diffusion.save_toy_checkpoint(args.out, pipeline, denoiser)
    if args.loss_csv:
        diffusion.write_loss_csv(args.loss_csv, losses)
    first = np.mean(losses[:10]) if len(losses) >= 10 else losses[0]
    last = np.mean(losses[-10:]) if len(losses) >= 10 else losses[-1]
    print(f"trained {args.steps} steps; probe loss {first:.6f} -> {last:.6f}")
    return EXIT_OK


def cmd_synth_toy(args: argparse.Namespace) -> int:
    try:
        pipeline, denoiser = diffusion.load_toy_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.bundle:
        b = load_bundle(args.bundle)
    else:
        b = gen_synthetic_bundle(args.bundle_seed, args.m, pipeline.d, args.scenario)
    schedule = diffusion.build_schedule(denoiser.t_max)
    patch = diffusion.sample_toy(
        pipeline, denoiser, b, schedule, seed=args.seed, k=args.topk, mode=args.mode
    )
    frames = np.tile(patch, (args.frames, 1))
    mel = audio.MelSpectrogram(
        frames=frames, sample_rate=args.sample_rate, n_mels=patch.shape[0]
    )
    audio.save_mel(args.out, mel)
    print(f"sampled patch for {b.sample_id} -> {args.out}")
    if args.wav:
        wav = audio.griffin_lim(mel, iterations=args.iterations, seed=args.seed)
        audio.write_wav(args.wav, wav)
        print(f"rendered {wav.duration:.2f} s -> {args.wav}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    failures = 0
    for path in args.paths:
        p = Path(path)
        try:
            head = p.open("rb").read(4)
        except OSError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        try:
            if head == bundle.MAGIC:
                b = load_bundle(p)
                caption = repr(b.caption_text) if b.caption_text else "none"
                print(
                    f"{path}: feature bundle sample_id={b.sample_id} m={b.m} d={b.d} "
                    f"caption={caption}"
                )
            elif head == b"M2CK":
                tensors = load_checkpoint(p)
                print(f"{path}: checkpoint with {len(tensors)} entries")
                for name in tensors:
                    arr = tensors[name]
                    shape = "scalar" if arr.ndim == 0 else "x".join(map(str, arr.shape))
                    value = f" = {float(arr):g}" if arr.ndim == 0 else ""
                    print(f"  {name}: {shape}{value}")
            elif head == audio.MEL_EXPORT_MAGIC:
                mel = audio.load_mel(p)
                print(f"{path}: mel export {mel.frames.shape[0]} frames x {mel.n_mels} bands")
            elif head == b"RIFF":
                wav = audio.read_wav(p)
                print(f"{path}: wav {wav.sample_rate} Hz, {wav.duration:.3f} s")
            else:
                print(f"error: {path}: unrecognized format {head!r}", file=sys.stderr)
                failures += 1
        except (BundleError, CheckpointError, audio.AudioError, OSError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            failures += 1
    return EXIT_PARTIAL if failures else EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--mode", choices=fusion.MODES, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.add_argument("--heads-detector", dest="heads_detector", type=int, default=None)
    p.add_argument("--heads-other", dest="heads_other", type=int, default=None)
    p.add_argument("--sample-rate", dest="sample_rate", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envfuse",
        description="RGB-D environment embedding pipeline: fixtures, fusion, "
        "acoustic metrics, and the toy diffusion path.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="write synthetic feature bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=bundle.DEFAULT_PATCHES)
    p.add_argument("--d", type=int, default=bundle.DEFAULT_DIM)
    p.add_argument("--scenario", choices=("mixed",) + bundle.SCENARIOS, default="mixed")
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("fuse", help="compute environment embeddings for bundles")
    p.add_argument("bundles", nargs="*", help="bundle file paths")
    p.add_argument("--bundle-dir", help="directory of .m2fb files")
    p.add_argument("--checkpoint", help="pipeline checkpoint; omitted -> seeded init")
    p.add_argument("--out", required=True, help="output directory for .f32 vectors")
    p.add_argument("--csv", help="also write one CSV row per sample")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("topk-sweep", help="selection-size sweep over both modes")
    p.add_argument("--bundles", required=True, help="directory of .m2fb files")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--k-list", help="comma-separated k values (default 20..240 step 20)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_topk_sweep)

    p = sub.add_parser("eval", help="RTE and MCD over paired reference/synthesized wavs")
    p.add_argument("--ref", required=True)
    p.add_argument("--syn", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--sample-count", type=int, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mel", help="export the log-mel spectrogram of a wav")
    p.add_argument("wav")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mel)

    p = sub.add_parser("train-toy", help="train the toy diffusion path end to end")
    p.add_argument("--out", required=True, help="checkpoint output")
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--d-model", dest="d_model", type=int, default=4)
    # the denoiser hidden width must be >= patch size or the residual path
    # cannot represent the near-identity map that noise prediction needs
    p.add_argument("--d-h", dest="d_h", type=int, default=16)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--mode", choices=fusion.MODES, default="shared")
    p.add_argument("--heads-detector", dest="heads_detector", type=int, default=2)
    p.add_argument("--heads-other", dest="heads_other", type=int, default=4)
    p.add_argument("--t-max", dest="t_max", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("synth-toy", help="sample a mel patch from a trained toy model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", help="condition on this bundle file")
    p.add_argument("--bundle-seed", dest="bundle_seed", type=int, default=0)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--scenario", choices=bundle.SCENARIOS, default="planted")
    p.add_argument("--out", required=True, help="mel export path")
    p.add_argument("--wav", help="also render audio via phase reconstruction")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--iterations", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--mode", choices=fusion.MODES, default="shared")
    p.add_argument("--sample-rate", dest="sample_rate", type=int, default=16000)
    p.set_defaults(func=cmd_synth_toy)

    p = sub.add_parser("inspect", help="summarize bundles, checkpoints, mel exports, wavs")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BundleError, CheckpointError, audio.AudioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
