"""``morphmark`` command line: data generation, both training stages,
pseudo-label inference, evaluation and overlays."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .autodiff import load_checkpoint
from .c2t import predict as c2t_predict, save_detectors, train_c2t
from .config import PipelineConfig
from .grid import read_landmarks_csv, read_png
from .regnet import RegistrationNet
from .stage1 import infer_pseudo, pseudo_label_array, train_stage1
from .synthbench import evaluate, generate, load_dataset, write_dataset

THREADS_ENV = "MORPHMARK_THREADS"


class CommandError(RuntimeError):
    pass


# --- csv helpers

def write_point_table(path, ids, points) -> None:
    """``image_id,index,x,y`` rows for ``(n, N, 2)`` points."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "index", "x", "y"])
        for uid, pts in zip(ids, points):
            for j, (x, y) in enumerate(pts):
                w.writerow([uid, j, repr(float(x)), repr(float(y))])


def read_point_table(path, ids=None) -> tuple[list, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CommandError(f"missing input file: {path}")
    rows: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"image_id", "index", "x", "y"}:
            raise CommandError(f"{path}: expected header image_id,index,x,y")
        for r in reader:
            rows.setdefault(r["image_id"], {})[int(r["index"])] = (float(r["x"]), float(r["y"]))
    order = list(ids) if ids is not None else list(rows)
    missing = [i for i in order if i not in rows]
    if missing:
        raise CommandError(f"{path}: no entries for image ids {missing[:5]}")
    N = max(len(v) for v in rows.values())
    out = np.full((len(order), N, 2), np.nan)
    for k, uid in enumerate(order):
        for j, xy in rows[uid].items():
            out[k, j] = xy
    return order, out


# --- shared plumbing

PRESETS = {"desk": PipelineConfig.desk, "paper": PipelineConfig}


def _resolve_config(args) -> PipelineConfig:
    base = PRESETS[args.preset]()
    cfg = PipelineConfig.load(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _finish_config(cfg: PipelineConfig, out: Path, name: str = "config.json") -> None:
    path = cfg.save(out / name)
    print(f"config: {path}")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"cannot write to output directory {out}: {exc.strerror or exc}") from exc
    return out


def _load_data(path):
    p = Path(path)
    manifest = p / "dataset.json" if p.is_dir() or p.suffix != ".json" else p
    if not manifest.exists():
        raise CommandError(f"missing dataset manifest: {manifest}")
    return load_dataset(manifest)


def _require(path: Path) -> Path:
    if not path.exists():
        raise CommandError(f"missing input file: {path}")
    return path


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError as exc:
            raise CommandError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    if n < 1:
        raise CommandError("thread count must be at least 1")
    torch.set_num_threads(n)
    return n


def _stage1_paths(directory: Path):
    return directory / "stage1.ckpt", directory / "stage1.json"


def _load_stage1(ckpt: Path):
    ckpt = _require(ckpt)
    meta_path = _require(ckpt.with_suffix(".json"))
    meta = json.loads(meta_path.read_text())
    cfg = PipelineConfig().update(meta["config"])
    model = RegistrationNet(cfg.stage1.regnet)
    model.load_state_dict(load_checkpoint(ckpt))
    model.eval()
    return model, meta, cfg


# --- commands

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    for flag in ("size", "count", "landmarks", "warp", "noise"):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg.data, flag, v)
    cfg.data.seed = cfg.seed
    cfg.data.validate()
    out = _out_dir(args.out)
    ds = generate(cfg.data, threads=_threads(args))
    manifest = write_dataset(ds, out)
    _finish_config(cfg, out)
    print(f"wrote {len(ds)} images to {manifest}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        cfg.stage1.epochs = args.epochs
    _threads(args)
    ds = _load_data(args.data)
    H, W = ds.images.shape[1:]
    cfg.stage1.regnet.image_size = (H, W)
    cfg.stage1.validate()
    if ds.landmarks is None or not np.isfinite(ds.landmarks[ds.exemplar_index]).all():
        raise CommandError("the dataset's exemplar has no landmark file")
    ex_pts = ds.landmarks[ds.exemplar_index]
    out = _out_dir(args.out)
    ckpt, meta_path = _stage1_paths(out)
    res = train_stage1(ds.images, ds.exemplar_index, ex_pts, cfg.stage1, seed=cfg.seed, log_path=out / "train_log.jsonl", ckpt_path=ckpt)
    meta = {"config": cfg.to_flat(), "field_point_sign": res.field_point_sign, "exemplar_id": ds.ids[ds.exemplar_index]}
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    (out / "regnet.json").write_text(json.dumps(cfg.stage1.regnet.to_dict(), indent=1, sort_keys=True) + "\n")
    pseudo = pseudo_label_array(res.store, len(ds), ds.exemplar_index, ex_pts)
    write_point_table(out / "pseudo_labels.csv", ds.ids, pseudo)
    _finish_config(cfg, out)
    print(f"wrote {ckpt}, {out / 'pseudo_labels.csv'}")
    return 0


def cmd_infer_pseudo(args) -> int:
    _threads(args)
    model, meta, cfg = _load_stage1(Path(args.ckpt))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.config:
        cfg.update(json.loads(_require(Path(args.config)).read_text()))
    ds = _load_data(args.data)
    ex = ds.exemplar_index
    if ds.landmarks is None or not np.isfinite(ds.landmarks[ex]).all():
        raise CommandError("the dataset's exemplar has no landmark file")
    pred = infer_pseudo(model, ds.images[ex], ds.landmarks[ex], ds.images, meta["field_point_sign"])
    pred[ex] = ds.landmarks[ex]
    out = _out_dir(args.out)
    write_point_table(out / "pseudo_labels.csv", ds.ids, pred)
    _finish_config(cfg, out)
    print(f"wrote {out / 'pseudo_labels.csv'}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        cfg.stage2.epochs = args.epochs
    cfg.stage2.validate()
    _threads(args)
    ds = _load_data(args.data)
    ex = ds.exemplar_index
    _, pseudo = read_point_table(args.pseudo, ds.ids)
    if ds.landmarks is not None and np.isfinite(ds.landmarks[ex]).all():
        pseudo[ex] = ds.landmarks[ex]
    out = _out_dir(args.out)
    res = train_c2t(ds.images, pseudo, ex, pseudo[ex], cfg.stage2, seed=cfg.seed, flip_permutation=ds.flip_permutation, log_path=out / "c2t_log.jsonl")
    save_detectors(res.f, res.g, out / "stage2_f.ckpt", out / "stage2_g.ckpt")
    (out / "stage2.json").write_text(json.dumps({"config": cfg.to_flat(), "n_landmarks": int(pseudo.shape[1])}, indent=1, sort_keys=True) + "\n")
    pred = c2t_predict(res.f, res.g, ds.images)
    write_point_table(out / "predictions.csv", ds.ids, pred)
    _finish_config(cfg, out)
    print(f"wrote {out / 'stage2_f.ckpt'}, {out / 'stage2_g.ckpt'}, {out / 'predictions.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_data(args.data)
    if ds.landmarks is None:
        raise CommandError("the dataset has no ground-truth landmarks")
    ids, pred = read_point_table(args.pred, ds.ids)
    keep = [k for k in range(len(ds)) if args.include_exemplar or k != ds.exemplar_index]
    truth = ds.landmarks[keep]
    if not np.isfinite(truth).all():
        raise CommandError("ground truth missing for some evaluated images")
    if pred.shape[1] != truth.shape[1]:
        raise CommandError(f"predictions have {pred.shape[1]} landmarks, truth has {truth.shape[1]}")
    report = evaluate(pred[keep], truth, spacing=ds.pixel_spacing)
    print(report.table())
    out = _out_dir(args.out) if args.out else Path(args.pred).resolve().parent
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    _finish_config(cfg, out, "eval_config.json")
    return 0


GREEN = (0, 255, 0)
RED = (255, 0, 0)


def draw_disks(rgb: np.ndarray, points, colour, radius: float = 1.5) -> np.ndarray:
    """Fill disks (default: the 3 x 3 block) around integer-rounded centres."""
    H, W = rgb.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W]
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        rgb[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2] = colour
    return rgb


def overlay_image(image, pred=None, truth=None) -> np.ndarray:
    gray = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if truth is not None:
        draw_disks(rgb, truth, RED)
    if pred is not None:
        draw_disks(rgb, pred, GREEN)
    return rgb


def _load_points(path, image_id):
    path = _require(Path(path))
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if set(header) == {"index", "x", "y"}:
        return read_landmarks_csv(path)
    if image_id is None:
        raise CommandError(f"{path} lists several images; pass --id")
    return read_point_table(path, [image_id])[1][0]


def cmd_overlay(args) -> int:
    from PIL import Image

    cfg = _resolve_config(args)
    image_path = _require(Path(args.image))
    image = read_png(image_path)
    image_id = args.id or image_path.stem
    pred = _load_points(args.pred, image_id) if args.pred else None
    truth = _load_points(args.truth, image_id) if args.truth else None
    if pred is None and truth is None:
        raise CommandError("nothing to draw: pass --pred and/or --truth")
    out = Path(args.out)
    _out_dir(out.parent)
    Image.fromarray(overlay_image(image, pred, truth), mode="RGB").save(out)
    written = [out]
    if args.ckpt:
        _threads(args)
        model, meta, _ = _load_stage1(Path(args.ckpt))
        if not args.exemplar:
            raise CommandError("--ckpt needs --exemplar (the exemplar PNG)")
        src = torch.as_tensor(read_png(_require(Path(args.exemplar))), dtype=torch.float32)[None, None]
        dst = torch.as_tensor(image, dtype=torch.float32)[None, None]
        with torch.no_grad():
            res = model(src, dst)
        stages = [("affine", res.warped_affine)] + [(f"local{i + 1}", w) for i, w in enumerate(res.warped)]
        for name, img in stages:
            p = out.with_name(f"{out.stem}_{name}.png")
            arr = np.clip(np.rint(img[0, 0].numpy().astype(np.float64) * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(p)
            written.append(p)
    _finish_config(cfg, out.parent, "overlay_config.json")
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# --- parser

def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--config", default=None, help="JSON config with data.*, stage1.*, stage2.* keys")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base configuration before --config and flags (default: desk)")
    p.add_argument("--threads", type=int, default=None, help=f"torch threads (default ${THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphmark", description="One-shot landmark detection by registration and co-teaching.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic landmark suite")
    _common(p)
    p.add_argument("--size", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--landmarks", type=int)
    p.add_argument("--warp", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train the registration cascade and write pseudo labels")
    _common(p)
    p.add_argument("--data", required=True, help="dataset.json or its directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("infer-pseudo", help="register the exemplar onto every image")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage1.ckpt (stage1.json must sit next to it)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer_pseudo)

    p = sub.add_parser("train-stage2", help="co-teach two detectors on pseudo labels")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pseudo", required=True, help="pseudo_labels.csv")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="predictions.csv or pseudo_labels.csv")
    p.add_argument("--out", default=None, help="directory for report.json (default: next to --pred)")
    p.add_argument("--include-exemplar", action="store_true", help="also score the labeled exemplar")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="draw predicted (green) and true (red) landmarks")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--pred", default=None, help="index,x,y CSV or an image_id table")
    p.add_argument("--truth", default=None)
    p.add_argument("--id", default=None, help="image id inside an image_id table (default: image file stem)")
    p.add_argument("--ckpt", default=None, help="stage1.ckpt: also write the intermediate warped exemplar")
    p.add_argument("--exemplar", default=None, help="exemplar PNG used with --ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"morphmark {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
