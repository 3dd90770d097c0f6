"""Command-line entry point: detect, gen-gt, train, eval, sample-h."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalkit, homsample, nessnet, stability, synth
from .basedet import score_map
from .imgcore import load_image, save_pgm

log = logging.getLogger("nessst")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_COMPUTE = 0, 1, 2, 3
IMAGE_SUFFIXES = {".pgm", ".png"}


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_atomic(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    if not files:
        raise UsageError(f"no .pgm/.png images in {d}")
    return files


def _read_image(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cannot read image: {path}")
    return load_image(path)


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"cannot read model: {p}")
    params, target, _ = nessnet.model_from_json(p.read_text(encoding="utf-8"))
    return params, target


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# ---- commands --------------------------------------------------------------


def cmd_detect(args, cfg):
    mode = stability.Mode(args.mode)
    model_path = args.model or cfg.paths.model
    params = None
    if mode.neural:
        if not model_path:
            raise UsageError(f"mode {mode.value} requires --model")
        params, _ = _load_model(model_path)
    img = _read_image(args.image)
    n = args.n or cfg.n
    t0 = time.perf_counter()
    kps = stability.detect(img, mode, n, cfg.detector, cfg.stability, model=params, seed=cfg.seed)
    dt = time.perf_counter() - t0
    text = stability.keypoints_to_csv(kps)
    out = args.out or cfg.paths.output
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)
    if args.score_map:
        target = Path(args.score_map)
        part = target.with_name(f".{target.name}.part")
        save_pgm(score_map(img, cfg.detector), part, normalize=True)
        os.replace(part, target)
    print(f"{len(kps)} keypoints in {dt:.3f}s", file=sys.stderr)


def _gt_for_image(path, cfg, predict=None, seed=None):
    img = _read_image(path)
    recs = stability.generate_ground_truth(img, cfg.detector, cfg.n, cfg.stability,
                                           seed=cfg.seed if seed is None else seed, predict=predict)
    return img, recs


def cmd_gen_gt(args, cfg):
    files = list_images(args.images)
    t0 = time.perf_counter()
    results = _pool_map(lambda p: _gt_for_image(p, cfg)[1], files, args.threads)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(stability.GT_HEADER)
    total = 0
    for path, recs in zip(files, results):
        wr.writerows(stability.gt_rows(path.name, recs))
        total += len(recs)
    write_atomic(args.out, buf.getvalue())
    print(f"{total} records from {len(files)} images in {time.perf_counter() - t0:.3f}s", file=sys.stderr)


def _samples(img, recs, target):
    rows = [g.row for g in recs]
    cols = [g.col for g in recs]
    patches = stability.net_patches(img, rows, cols)
    out = []
    for g, p in zip(recs, patches):
        y = g.lambda_gt if target == "lambda" else (g.keypoint.r or 0.0)
        out.append(nessnet.TrainSample(p, g.keypoint.s, y))
    return out


def _dataset_from_csv(csv_path, image_dir, target):
    csv_path = Path(csv_path)
    image_dir = Path(image_dir) if image_dir else csv_path.parent
    with open(csv_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cache, out = {}, []
    for row in rows:
        name = row["image"]
        if name not in cache:
            cache[name] = _read_image(image_dir / name)
        img = cache[name]
        patch = stability.net_patches(img, [int(row["row"])], [int(row["col"])])[0]
        y = float(row["lambda"]) if target == "lambda" else float(row["r"] or 0.0)
        out.append(nessnet.TrainSample(patch, float(row["s"]), y))
    return out


def cmd_train(args, cfg):
    data = Path(args.data)
    tcfg = cfg.train
    if args.epochs is not None:
        from dataclasses import replace

        tcfg = replace(tcfg, epochs=args.epochs)
    regen = None
    if data.is_dir():
        files = list_images(data)
        pairs = _pool_map(lambda p: _gt_for_image(p, cfg), files, args.threads)
        images = [img for img, _ in pairs]
        dataset = [s for img, recs in pairs for s in _samples(img, recs, args.target)]

        def regen(epoch, params):
            def predict(p):
                return nessnet.forward(params, p)

            seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1, np.uint64)[0])
            out = []
            for img in images:
                recs = stability.generate_ground_truth(img, cfg.detector, cfg.n, cfg.stability, seed=seed, predict=predict)
                out.extend(_samples(img, recs, args.target))
            return out
    elif data.is_file():
        dataset = _dataset_from_csv(data, args.image_dir, args.target)
    else:
        raise FileNotFoundError(f"no such training data: {data}")
    t0 = time.perf_counter()
    params, trace = nessnet.train(dataset, tcfg, regenerate=regen)
    write_atomic(args.out, nessnet.model_to_json(params, tcfg, target=args.target))
    loss_path = args.loss_out or str(args.out) + ".loss.csv"
    lines = ["epoch,loss"] + [f"{i},{v:.12g}" for i, v in enumerate(trace)]
    write_atomic(loss_path, "\n".join(lines) + "\n")
    print(f"trained on {len(dataset)} samples, loss {trace[0]:.6g} -> {trace[-1]:.6g} "
          f"in {time.perf_counter() - t0:.3f}s", file=sys.stderr)


def cmd_eval(args, cfg):
    files = list_images(args.images)
    valid = {m.value for m in stability.Mode}
    names = [m.strip() for part in args.mode for m in part.split(",") if m.strip()]
    bad = [m for m in names if m not in valid]
    if bad or not names:
        raise UsageError(f"unknown mode(s) {', '.join(bad) or '(none)'}; choose from {', '.join(sorted(valid))}")
    modes = [stability.Mode(m) for m in names]
    params = None
    if any(m.neural for m in modes):
        model_path = args.model or cfg.paths.model
        if not model_path:
            raise UsageError("neural modes require --model")
        params, _ = _load_model(model_path)
    images = [_read_image(p) for p in files]
    settings = cfg.eval
    jobs = [(i, j) for i in range(len(files)) for j in range(settings.pairs_per_image)]
    runs = []
    for mode in modes:
        def detect_fn(im, mode=mode):
            return stability.detect(im, mode, cfg.n, cfg.detector, cfg.stability, model=params, seed=cfg.seed)

        def one(job, mode=mode, detect_fn=detect_fn):
            i, j = job
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i, j]))
            pair = evalkit.synth_pair(images[i], settings.sampler(), rng)
            return evalkit.evaluate_pair(pair, detect_fn, settings, rng, pair_id=f"{files[i].name}#{j}")

        records = _pool_map(one, jobs, args.threads)
        runs.append({"mode": mode.value, "records": records, "aggregate": evalkit.aggregate(records, settings)})
        print(f"{mode.value}: mAA={runs[-1]['aggregate']['mAA']:.4f} over {len(records)} pairs", file=sys.stderr)
    report = {"seed": cfg.seed, "n": cfg.n, "runs": runs}
    write_atomic(args.out, json.dumps(report, indent=2, sort_keys=False) + "\n")


def cmd_sample_h(args, cfg):
    st = cfg.stability
    sampler = homsample.HomographySamplerConfig(d=st.d, outer=st.p * st.d, jitter=st.jitter, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    hs = homsample.sample_homographies(sampler, rng, args.count) if args.count else np.zeros((0, 3, 3))
    write_atomic(args.out, homsample.format_homographies(hs))
    print(f"{args.count} homographies", file=sys.stderr)


def cmd_make_fixtures(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "textured":
        imgs = [synth.textured((args.size, args.size), seed=cfg.seed + i) for i in range(args.count)]
    else:
        imgs = synth.pattern_images(args.count, seed=cfg.seed, size=args.size)
    for i, img in enumerate(imgs):
        save_pgm(img, out / f"{args.kind}_{i:03d}.pgm")
    print(f"{len(imgs)} images in {out}", file=sys.stderr)


# ---- parser ----------------------------------------------------------------


def _common(p, default):
    d = (lambda v: v) if default else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", metavar="PATH", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides config)")
    p.add_argument("--threads", type=int, default=d(1), metavar="N")
    p.add_argument("--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = ArgParser(prog="nessst", description=__doc__)
    _common(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)
    modes = [m.value for m in stability.Mode]

    p = sub.add_parser("detect", help="detect keypoints and write a CSV")
    _common(p, False)
    p.add_argument("image")
    p.add_argument("--mode", default="ST", choices=modes)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--score-map", default=None, metavar="PGM", help="also write the min-max normalized score map")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gen-gt", help="stability targets for every image in a directory")
    _common(p, False)
    p.add_argument("images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("train", help="train the stability regressor")
    _common(p, False)
    p.add_argument("data", help="image directory or ground-truth CSV")
    p.add_argument("--image-dir", default=None, help="images referenced by a ground-truth CSV")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--loss-out", default=None, help="loss trace CSV (default: <out>.loss.csv)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--target", default="lambda", choices=["lambda", "r"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeatability and homography metrics on synthetic warp pairs")
    _common(p, False)
    p.add_argument("images")
    p.add_argument("--mode", action="append", default=None, help="detector mode; repeat or comma-separate")
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-h", help="write sampled local homographies")
    _common(p, False)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_h)

    p = sub.add_parser("make-fixtures", help="render synthetic fixture images")
    _common(p, False)
    p.add_argument("out")
    p.add_argument("--kind", choices=["textured", "patterns"], default="textured")
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mode", None) is None and args.command == "eval":
        args.mode = ["ST"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        print(f"seed {cfg.seed}", file=sys.stderr)
        log.debug("config %s", json.dumps(cfg.to_dict(), sort_keys=True))
        args.func(args, cfg)
    except (UsageError, cfgmod.ConfigError, stability.ConfigurationError, homsample.SamplerConfigError) as exc:
        print(f"nessst: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"nessst: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"nessst: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
