"""``sesr`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import metrics
from .config import ConfigError, parse_noise_type, parse_snrs, resolve
from .dsp import Spectrogram, magnitude, read_wav, stft, write_wav, plot_spectrograms
from .mixing import (
    NoiseCorpus,
    build_mixture_manifest,
    measure_snr,
    read_manifest,
    render,
    write_manifest,
)
from .pipeline import SYSTEMS, STAGE_SYSTEM, infer, reconstruct
from .recognizer import cosine_score
from .seeding import rng_for, set_deterministic
from .training import (
    ALL_STAGES,
    PREREQUISITE,
    CheckpointError,
    PairedData,
    StageOrderError,
    TrainingDiverged,
    finetune_step1_joint,
    load_checkpoint,
    train_sid_baseline,
    train_step1_independent,
    train_step2,
)

log = logging.getLogger("sesr")

SYSTEM_LABEL = {"sid": "SID", "step1": "SESR-Step1", "step2": "SESR-Step2"}


class UsageError(Exception):
    """Bad arguments or inputs; exit code 2."""


# --- synth / prepare / mix / audit / trials --------------------------------------------


def cmd_synth(args, _cfg):
    from .synth import make_corpus

    root = make_corpus(args.out, n_speakers=args.speakers, utts_per_speaker=args.utts,
                       duration=args.duration, seed=args.seed or 0)
    print(f"wrote demo corpus to {root}")


def _check_wav(path):
    """Returns (num_samples, sample_rate) or raises ValueError with a reason."""
    try:
        sr, data = wavfile.read(str(path))
    except Exception as e:  # scipy raises several types for corrupt files
        raise ValueError(f"unreadable ({e.__class__.__name__}: {e})") from None
    if data.ndim != 1:
        raise ValueError(f"not mono ({data.shape[1]} channels)")
    if len(data) == 0:
        raise ValueError("empty")
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite samples")
    return len(data), sr


def cmd_prepare(args, cfg):
    root = Path(args.clean_root)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    rows, rejects = [], []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(spk_dir.rglob("*.wav"))
        good = []
        for f in files:
            try:
                n, sr = _check_wav(f)
            except ValueError as e:
                rejects.append({"path": str(f), "reason": str(e)})
                continue
            good.append((f, n, sr))
        k = cfg.doc["test_per_speaker"] if args.test_per_speaker is None else args.test_per_speaker
        for i, (f, n, sr) in enumerate(good):
            rel = f.relative_to(spk_dir).with_suffix("")
            rows.append({
                "utt_id": f"{spk_dir.name}/{rel.as_posix()}",
                "speaker_id": spk_dir.name,
                "path": str(f.resolve()),
                "num_samples": n,
                "sample_rate": sr,
                "duration": n / sr,
                "split": "test" if len(good) > k and i >= len(good) - k else "train",
            })
    for r in rejects:
        print(f"rejected {r['path']}: {r['reason']}", file=sys.stderr)
    if not rows:
        raise UsageError(f"{root}: no valid WAV files found")
    write_manifest(args.out, rows)
    if rejects:
        write_manifest(str(args.out) + ".rejects.jsonl", rejects)
    n_spk = len({r["speaker_id"] for r in rows})
    print(f"{len(rows)} utterances from {n_spk} speakers -> {args.out} ({len(rejects)} rejected)")


def cmd_mix(args, cfg):
    rows = read_manifest(args.manifest)
    if args.split != "all":
        rows = [r for r in rows if r.get("split", "train") == args.split]
    if not rows:
        raise UsageError(f"no {args.split} utterances in {args.manifest}")
    corpus = NoiseCorpus.from_directory(args.noise_root)
    try:
        specs = build_mixture_manifest(rows, corpus, cfg.snrs, cfg.seed, cfg.noise_types, grid=args.grid)
    except ValueError as e:
        raise RuntimeError(str(e)) from None
    out = Path(args.out)
    split = {r["utt_id"]: r.get("split", "train") for r in rows}
    records = []
    for spec in specs:
        speech = read_wav(spec.clean_path)
        mix, _ = render(spec, speech, corpus[spec.noise_id].load())
        path = out / "wav" / f"{spec.mix_id}.wav"
        write_wav(path, mix)
        records.append({**asdict(spec), "mix_id": spec.mix_id, "mix_path": str(path.resolve()),
                        "split": split[spec.utt_id]})
    write_manifest(out / "mixtures.jsonl", records)
    print(f"{len(records)} mixtures -> {out / 'mixtures.jsonl'}")


def cmd_audit(args, _cfg):
    bad = 0
    rows = read_manifest(args.mixtures)
    for r in rows:
        clean = read_wav(r["clean_path"])
        mix = read_wav(r["mix_path"])
        if len(mix) != len(clean):
            print(f"FAIL {r['mix_id']}: length {len(mix)} != {len(clean)}")
            bad += 1
            continue
        snr = measure_snr(clean, mix.samples - clean.samples)
        err = abs(snr - r["snr_db"])
        if not err <= args.tol:
            print(f"FAIL {r['mix_id']}: measured {snr:.4f} dB, manifest {r['snr_db']:g} dB")
            bad += 1
    print(f"audited {len(rows)} mixtures, {bad} outside +-{args.tol} dB")
    if bad:
        raise RuntimeError("SNR audit failed")


def cmd_trials(args, cfg):
    rows = [r for r in read_manifest(args.manifest) if args.split == "all" or r.get("split") == args.split]
    utts = {r["utt_id"]: r["speaker_id"] for r in rows}
    if len(set(utts.values())) < 2:
        raise UsageError("need at least two speakers to build trials")
    trials = metrics.make_trials(utts, rng_for(cfg.seed, "trials"), args.nontarget)
    metrics.write_trials(args.out, trials)
    print(f"{len(trials)} trials ({sum(t[2] for t in trials)} target) -> {args.out}")


# --- train ------------------------------------------------------------------------------


def _paired_from_mixtures(path, cfg, speakers=None):
    rows = [r for r in read_manifest(path) if r.get("split", "train") == "train"]
    if not rows:
        raise UsageError(f"no training mixtures in {path}")
    found = sorted({r["speaker_id"] for r in rows})
    speakers = list(speakers) if speakers else found
    index = {s: i for i, s in enumerate(speakers)}
    missing = [s for s in found if s not in index]
    if missing:
        raise UsageError(f"speakers {missing} not in the checkpoint inventory")
    stft_cfg = cfg.stft

    def spec(p):
        return magnitude(stft(read_wav(p), stft_cfg)).values.astype(np.float32)

    data = PairedData(
        noisy=[spec(r["mix_path"]) for r in rows],
        clean=[spec(r["clean_path"]) for r in rows],
        speakers=[index[r["speaker_id"]] for r in rows],
        n_speakers=len(speakers),
        utt_ids=[r["mix_id"] for r in rows],
    )
    return data, speakers


def _ckpt_path(workdir, stage):
    return Path(workdir) / "checkpoints" / f"{stage}.ckpt"


def cmd_train(args, cfg):
    set_deterministic()
    stage = args.stage
    workdir = cfg.workdir
    mixtures = args.mixtures or workdir / "mix" / "train" / "mixtures.jsonl"
    ckpt_path = _ckpt_path(workdir, stage)
    log_path = workdir / "logs" / f"{stage}.jsonl"

    own = None
    if args.resume and ckpt_path.exists():
        own = load_checkpoint(ckpt_path)
        if own.complete:
            print(f"{stage} already complete at {ckpt_path}")
            return
    prereq = None
    need = PREREQUISITE[stage]
    if need is not None and own is None:
        p = _ckpt_path(workdir, need)
        if not p.exists():
            raise StageOrderError(f"{stage} requires a completed {need} checkpoint ({p} not found)")
        prereq = load_checkpoint(p)

    base = own or prereq
    data, speakers = _paired_from_mixtures(mixtures, cfg, base.speakers if base else None)
    model = cfg.model(len(speakers))
    if base is not None and base.config_hash != model.hash():
        raise CheckpointError(
            f"checkpoint config hash {base.config_hash} does not match the configured model {model.hash()}"
        )
    stage_cfg = cfg.stage(stage)
    if own is None:
        log_path.unlink(missing_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    kw = dict(log_path=log_path, checkpoint_path=ckpt_path)
    if stage == "step1_independent":
        ck = train_step1_independent(data, stage_cfg, model, resume=own, speakers=speakers, **kw)
    elif stage == "sid":
        ck = train_sid_baseline(data, stage_cfg, model, resume=own, speakers=speakers, **kw)
    elif stage == "step1_joint":
        ck = finetune_step1_joint(own or prereq, data, stage_cfg, **kw)
    else:
        ck = train_step2(own or prereq, data, stage_cfg, **kw)
    last = ck.history[-1] if ck.history else {}
    print(f"{stage}: {ck.epoch} epochs, L={last.get('L', float('nan')):.4f} -> {ckpt_path}")


# --- evaluate ---------------------------------------------------------------------------


def _conditions(rows, cfg, args):
    types = parse_noise_type(args.noise_type) if args.noise_type else cfg.noise_types
    snrs = parse_snrs(args.snr) if args.snr else cfg.snrs
    present = sorted({(r["category"], float(r["snr_db"])) for r in rows})
    conds = [(c, s) for c in types for s in snrs if (c, s) in present]
    return conds


def _load_systems(paths, kinds):
    systems = []
    for i, p in enumerate(paths):
        ck = load_checkpoint(p)
        kind = kinds[i] if kinds else STAGE_SYSTEM[ck.stage]
        if kind == "step2" and ck.se2_params is None or kind == "step1" and ck.se1_params is None:
            raise UsageError(f"{p}: a {ck.stage} checkpoint cannot be evaluated as {kind}")
        systems.append((kind, ck))
    return systems


def cmd_evaluate(args, cfg):
    set_deterministic()
    rows = [r for r in read_manifest(args.mixtures) if r.get("split", "test") == "test"] or read_manifest(args.mixtures)
    if not rows:
        raise UsageError(f"{args.mixtures}: empty")
    systems = _load_systems(args.checkpoint, args.system)
    conds = _conditions(rows, cfg, args)
    stft_cfg = cfg.stft
    cache = {}

    def wav(p):
        if p not in cache:
            cache[p] = read_wav(p)
        return cache[p]

    def spec(w):
        return magnitude(stft(w, stft_cfg)).values.astype(np.float32)

    clean_rows = {r["utt_id"]: r for r in rows}
    utt_ids = sorted(clean_rows)
    enroll_pos = {u: i for i, u in enumerate(utt_ids)}
    groups = {("original", None): [(u, clean_rows[u]["clean_path"]) for u in utt_ids]}
    for c, s in conds:
        groups[(c, s)] = sorted((r["utt_id"], r["mix_path"]) for r in rows
                                if r["category"] == c and float(r["snr_db"]) == s)

    table, records = [], []
    trials = None
    if args.task == "sv":
        if not args.trials:
            raise UsageError("--trials is required for the sv task")
        trials = metrics.read_trials(args.trials)
        unknown = {u for a, b, _ in trials for u in (a, b)} - set(utt_ids)
        if unknown:
            raise UsageError(f"trial utterances missing from {args.mixtures}: {sorted(unknown)[:3]}")
    if args.task == "enhance":
        if any(kind == "sid" for kind, _ in systems):
            raise UsageError("the enhance task needs an SE checkpoint (step1/step2)")
        groups.pop(("original", None))

    outputs = {}
    for key, members in groups.items():
        specs = [spec(wav(p)) for _, p in members]
        for kind, ck in systems:
            outputs[key, kind] = infer(ck.build_system(), kind, specs)

    tmp = tempfile.TemporaryDirectory() if args.task == "enhance" else None
    for (cat, snr), members in groups.items():
        row = {"noise_type": cat.capitalize(), "snr": "" if snr is None else f"{snr:g}"}
        cond = {"noise_type": cat, "snr": snr}
        if args.task == "enhance":
            clean_ws = [wav(clean_rows[u]["clean_path"]) for u, _ in members]
            noisy_ws = [wav(p) for _, p in members]
            row["Noisy STOI"] = float(np.mean([metrics.stoi(c, n) for c, n in zip(clean_ws, noisy_ws)]))
            records.append({"metric": "stoi", "system": "noisy", "condition": cond, "value": row["Noisy STOI"]})
            pesq_noisy = [metrics.pesq_external(clean_rows[u]["clean_path"], p) for u, p in members]
            if all(v is not None for v in pesq_noisy):
                row["Noisy PESQ"] = float(np.mean(pesq_noisy))
                records.append({"metric": "pesq", "system": "noisy", "condition": cond, "value": row["Noisy PESQ"]})
        for kind, ck in systems:
            out = outputs[(cat, snr), kind]
            label = SYSTEM_LABEL[kind]
            if args.task == "sid":
                targets = np.array([ck.speakers.index(clean_rows[u]["speaker_id"]) for u, _ in members])
                vals = {"Top1 (%)": 100 * metrics.topk_accuracy(out["logits"], targets, 1),
                        "Top5 (%)": 100 * metrics.topk_accuracy(out["logits"], targets, min(5, out["logits"].shape[1]))}
            elif args.task == "sv":
                enroll = outputs[("original", None), kind]["embeddings"]
                pos = {u: i for i, (u, _) in enumerate(members)}
                scores = [cosine_score(enroll[enroll_pos[a]], out["embeddings"][pos[b]]) for a, b, _ in trials]
                s = metrics.ScoreSet(scores, [t[2] for t in trials])
                vals = {"EER (%)": 100 * metrics.eer(s), "DCF": metrics.avg_dcf(s)}
            else:
                stois, pesqs = [], []
                for (u, p), e in zip(members, out["enhanced"]):
                    noisy = wav(p)
                    enhanced = reconstruct(e, noisy, stft_cfg)
                    stois.append(metrics.stoi(wav(clean_rows[u]["clean_path"]), enhanced))
                    if "Noisy PESQ" in row:
                        ep = Path(tmp.name) / f"{kind}.wav"
                        write_wav(ep, enhanced)
                        pesqs.append(metrics.pesq_external(clean_rows[u]["clean_path"], ep))
                vals = {"STOI": float(np.mean(stois))}
                if pesqs:
                    vals["PESQ"] = float(np.mean(pesqs))
            for name, v in vals.items():
                row[f"{label} {name}"] = v
                records.append({"metric": name, "system": kind, "condition": cond, "value": v})
        table.append(row)
    if tmp is not None:
        tmp.cleanup()

    columns = list(table[0].keys())
    print(metrics.format_table(table, columns, ["Noise Type", "SNR"] + columns[2:]))
    out = args.out or cfg.workdir / "reports" / f"{args.task}.json"
    metrics.write_results_json(out, records)
    print(f"\nJSON -> {out}")


# --- enhance ----------------------------------------------------------------------------


def cmd_enhance(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    if ck.se1_params is None:
        raise UsageError(f"{args.checkpoint}: a {ck.stage} checkpoint has no enhancer")
    try:
        noisy = read_wav(args.input)
    except Exception as e:
        raise RuntimeError(f"cannot read {args.input}: {e}") from None
    system = ck.build_system().eval()
    stft_cfg = cfg.stft
    x = magnitude(stft(noisy, stft_cfg)).values.astype(np.float32)
    out1 = infer(system, "step1", [x])["enhanced"][0]
    out2 = infer(system, "step2", [x])["enhanced"][0] if ck.se2_params is not None else None
    final = out2 if out2 is not None else out1
    write_wav(args.output, reconstruct(final, noisy, stft_cfg))
    print(f"enhanced ({'SE2' if out2 is not None else 'SE1'}) -> {args.output}")
    if args.png:
        panels, titles = [x, out1], ["Noisy", "SE1"]
        if out2 is not None:
            panels.append(out2)
            titles.append("SE2")
        if args.clean:
            panels.append(magnitude(stft(read_wav(args.clean), stft_cfg)).values)
            titles.append("Clean")
        plot_spectrograms([Spectrogram(np.asarray(p, np.float64), stft_cfg) for p in panels], args.png, titles)
        print(f"{len(panels)}-panel spectrogram -> {args.png}")


# --- desk experiment / config -----------------------------------------------------------


def cmd_desk(args, _cfg):
    from .pipeline import DeskConfig, run_desk_experiment

    seeds = [int(s) for s in args.seeds.split(",")]
    runs = []
    for seed in seeds:
        r = run_desk_experiment(seed, DeskConfig())
        r.pop("history")
        runs.append(r)
        print(f"seed {seed}: " + ", ".join(f"{k} top1={v['top1']:.3f}" for k, v in r.items()), flush=True)
    rows = []
    for kind in SYSTEMS:
        row = {"system": SYSTEM_LABEL[kind]}
        for m in ("top1", "top5", "eer", "dcf", "stoi_noisy", "stoi_enhanced"):
            vals = [r[kind][m] for r in runs if m in r[kind]]
            row[m] = statistics.median(vals) if vals else None
        rows.append(row)
    print(metrics.format_table(rows, list(rows[0])))
    if args.out:
        Path(args.out).write_text(json.dumps({"seeds": seeds, "runs": runs, "median": rows}, indent=2))


def cmd_config(_args, cfg):
    print(cfg.to_json())


# --- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (env SESR_CONFIG)")
    common.add_argument("--preset", choices=["full", "desk"], help="base preset (env SESR_PRESET)")
    common.add_argument("--seed", type=int, help="global seed (env SESR_SEED)")
    common.add_argument("--workdir", help="working directory (env SESR_WORKDIR)")
    common.add_argument("--noise-type", help="noise, music, babble, a comma list, or all (env SESR_NOISE_TYPE)")
    common.add_argument("--snr", help="comma-separated SNRs in dB (env SESR_SNR)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sesr", description="Joint speech enhancement and speaker recognition")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic demo corpus")
    s.add_argument("out")
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--utts", type=int, default=8)
    s.add_argument("--duration", type=float, default=3.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", parents=[common], help="index clean speech (root/<speaker>/*.wav)")
    s.add_argument("clean_root")
    s.add_argument("--out", required=True)
    s.add_argument("--test-per-speaker", type=int)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("mix", parents=[common], help="mix clean utterances with noise at set SNRs")
    s.add_argument("manifest")
    s.add_argument("noise_root")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "test", "all"], default="train")
    s.add_argument("--grid", action="store_true", help="every utterance at every (noise type, SNR)")
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("audit", parents=[common], help="re-measure mixture SNRs")
    s.add_argument("mixtures")
    s.add_argument("--tol", type=float, default=0.01)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("trials", parents=[common], help="build a verification trial list")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "test", "all"], default="test")
    s.add_argument("--nontarget", type=int, default=2)
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("train", parents=[common], help="run one training stage")
    s.add_argument("--stage", required=True, choices=list(ALL_STAGES))
    s.add_argument("--mixtures", help="training mixture manifest (default WORKDIR/mix/train/mixtures.jsonl)")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="per-condition report tables")
    s.add_argument("--task", required=True, choices=["sid", "sv", "enhance"])
    s.add_argument("--checkpoint", required=True, action="append")
    s.add_argument("--system", action="append", choices=list(SYSTEMS),
                   help="system per checkpoint (default: from the checkpoint stage)")
    s.add_argument("--mixtures", required=True, help="test mixture manifest (grid mode)")
    s.add_argument("--trials")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("enhance", parents=[common], help="enhance one WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--png")
    s.add_argument("--clean")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("desk", parents=[common], help="desk-scale experiment on a synthetic micro-corpus")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--out")
    s.set_defaults(func=cmd_desk)

    s = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {"seed": args.seed, "workdir": args.workdir}
        if args.noise_type:
            overrides["noise_types"] = parse_noise_type(args.noise_type)
        if args.snr:
            overrides["snrs"] = parse_snrs(args.snr)
        cfg = resolve(args.config, args.preset, overrides)
    except ConfigError as e:
        print(f"sesr: config error: {e}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except (UsageError, StageOrderError) as e:
        print(f"sesr: error: {e}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1
    except (TrainingDiverged, CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"sesr: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
