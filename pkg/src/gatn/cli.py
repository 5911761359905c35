"""Command-line driver: ``gatn <subcommand> [options]``.

Subcommands: synth, train-global, train-triplet, eval, attend, info.
Configuration is resolved as defaults < GATN_SEED < ``--config`` file <
``--set key=value`` < dedicated flags.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path


from . import checkpoint, config, global_net, pipeline, retrieval, triplet
from .data import dataset, netpbm, synth
from .tensor import TensorError

log = logging.getLogger("gatn")

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "dtype": "dtype",
    "k": "k",
    "lr": "lr",
    "epochs": None,  # resolved per subcommand
    "batch_size": "batch_size",
    "alpha": "alpha",
    "mining": "mining",
    "P": "P",
    "K": "K",
    "n_test_ids": "n_test_ids",
    "augment": "augment",
    "fusion": "fusion",
    "same_camera_filter": "same_camera_filter",
}


class CliError(Exception):
    pass


def resolve_config(args, base: config.Config | None = None, epochs_key: str | None = None) -> config.Config:
    cfg = base if base is not None else config.Config()
    env = os.environ.get("GATN_SEED")
    if env is not None and base is None:
        try:
            cfg = cfg.updated(seed=int(env))
        except ValueError:
            raise config.ConfigError(f"GATN_SEED must be an integer, got {env!r}") from None
    if getattr(args, "config", None):
        cfg = config.load(args.config, cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise config.ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.updated(**{key.strip(): value.strip()})
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "epochs":
            key = epochs_key
            if key is None:
                continue
        overrides[key] = value
    return cfg.updated(**overrides).validate()


def _print(*parts) -> None:
    print(*parts, flush=True)


def load_splits(args, cfg: config.Config):
    ds = dataset.load_dataset(args.data, cfg.height, cfg.width, cfg.protocol)
    if getattr(args, "split", None):
        return dataset.apply_split(ds, dataset.read_split(args.split))
    return dataset.split(ds, cfg.n_test_ids, cfg.seed)


def _augmenter(cfg: config.Config):
    return (lambda x, rng: dataset.augment_batch(x, rng)) if cfg.augment else None


# --- subcommands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    sc = synth.SynthConfig(ids=args.ids, images_per_id=args.images_per_id, cameras=args.cameras, seed=args.seed, out_dir=args.out)
    ds, _ = synth.generate(sc)
    _print(f"wrote {len(ds)} images of {sc.ids} identities to {args.out} (manifest {synth.MANIFEST})")
    return 0


def cmd_train_global(args) -> int:
    cfg = resolve_config(args, epochs_key="global_epochs")
    train, test = load_splits(args, cfg)
    if args.split_out:
        dataset.write_split(train, test, args.split_out)
    y, ids = train.class_labels()
    _print(f"train_images={len(train)} identities={len(ids)} test_identities={len(test.identities)}")
    t0 = time.perf_counter()
    res = global_net.train_global(
        train.images(dtype=cfg.dtype),
        y,
        epochs=cfg.global_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        decay=cfg.decay,
        seed=cfg.seed,
        dtype=cfg.dtype,
        augment=_augmenter(cfg),
        log_fn=lambda e, loss, lr: _print(f"epoch={e} loss={loss:.6f} lr={lr:.6g}"),
    )
    _print(f"train_accuracy={res.train_accuracy:.4f} seconds={time.perf_counter() - t0:.1f}")
    checkpoint.save_global(args.out, res.params, cfg)
    _print(f"saved {args.out}")
    return 0


def cmd_train_triplet(args) -> int:
    gck = checkpoint.load(args.global_ckpt)
    cfg = resolve_config(args, gck.config, epochs_key="triplet_epochs")
    gparams = checkpoint.global_params(gck).astype(cfg.dtype)
    train, _ = load_splits(args, cfg)
    t0 = time.perf_counter()
    res = triplet.train_triplet(
        train.images(dtype=cfg.dtype),
        train.labels(),
        gparams,
        epochs=cfg.triplet_epochs,
        k=cfg.k,
        mining=triplet.MiningConfig(cfg.alpha, cfg.mining, cfg.P, cfg.K),
        lr=cfg.lr,
        decay=cfg.decay,
        seed=cfg.seed,
        dtype=cfg.dtype,
        channels=cfg.channels,
        augment=_augmenter(cfg),
        log_fn=lambda st: _print(st.line()),
    )
    _print(f"seconds={time.perf_counter() - t0:.1f}")
    checkpoint.save_local(args.out, gparams, res.params, cfg)
    _print(f"saved {args.out}")
    return 0


def write_per_query_csv(report: retrieval.EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "first_hit_rank", "average_precision"])
        for q, r, ap in report.csv_rows():
            w.writerow([q, r, f"{ap:.6f}"])


def write_report_dir(out: Path, test, report, qd, gd, cfg, global_report=None) -> None:
    from . import plotting

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.text())
    write_per_query_csv(report, out / "per_query.csv")
    with open(out / "cmc.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "fused"] + (["global"] if global_report is not None else []))
        for r in range(len(report.cmc)):
            row = [r + 1, f"{report.cmc[r]:.6f}"]
            if global_report is not None:
                row.append(f"{global_report.cmc[r]:.6f}")
            w.writerow(row)
    curves = {f"fused k={cfg.k}": report.cmc}
    if global_report is not None:
        curves["global only"] = global_report.cmc
    plotting.plot_cmc(curves, out / "cmc.png")
    ranked = retrieval.rank_gallery(retrieval.pairwise_distances(qd.descriptors, gd.descriptors))
    n = min(5, len(test.query))
    plotting.plot_rank_lists(
        test.images(test.query[:n]),
        test.images(test.gallery),
        [r.order for r in ranked[:n]],
        test.labels(test.query[:n]),
        test.labels(test.gallery),
        out / "ranklist.png",
    )


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.ckpt)
    cfg = resolve_config(args, ck.config)
    gparams = checkpoint.global_params(ck).astype(cfg.dtype)
    k = 0 if args.global_only else cfg.k
    lparams = checkpoint.local_params(ck) if k else None
    _, test = load_splits(args, cfg)
    match_norm = cfg.fusion == "norm-matched"
    report, qd, gd = pipeline.evaluate_split(test, gparams, lparams, k, cfg.max_rank, cfg.same_camera_filter, match_norm)
    sys.stdout.write(report.text())
    sys.stdout.flush()
    if args.csv:
        write_per_query_csv(report, args.csv)
    if args.report_dir:
        base = None
        if k:
            base = pipeline.evaluate_split(test, gparams, None, 0, cfg.max_rank, cfg.same_camera_filter)[0]
        write_report_dir(Path(args.report_dir), test, report, qd, gd, cfg, base)
    return 0


def cmd_attend(args) -> int:
    from . import overlay

    ck = checkpoint.load(args.ckpt)
    cfg = resolve_config(args, ck.config)
    gparams = checkpoint.global_params(ck).astype(cfg.dtype)
    img = dataset.load_image(args.image, cfg.height, cfg.width).astype(cfg.dtype)
    amap = global_net.attention_map(img, gparams)
    patches = global_net.select_patches(amap, img, cfg.k)
    overlay.render_attention_overlay(img, amap, patches, args.out)
    if args.map_out:
        overlay.write_attention_map(amap, args.map_out)
    for rank, (i, j) in enumerate(patches.positions, 1):
        _print(f"patch={rank} row={i} col={j} attention={amap[i, j]:.6g}")
    _print(f"saved {args.out}")
    return 0


def cmd_info(args) -> int:
    ck = checkpoint.load(args.ckpt)
    _print(f"stage = {ck.stage}")
    _print(f"tensors = {len(ck.tensors)}")
    for name, a in ck.tensors.items():
        _print(f"  {name} {a.dtype} {'x'.join(map(str, a.shape)) or 'scalar'}")
    _print("config:")
    for ln in ck.config.to_text().splitlines():
        _print(f"  {ln}")
    return 0


# --- parser -----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatn", description="Attention-guided re-identification: training, retrieval and visualisation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train-global,train-triplet,eval,attend,info}")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=40)
    p.add_argument("--images-per-id", type=int, default=4)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-global", help="train the global network (cross-entropy)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-test-ids", type=int)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--split", help="use this split file instead of drawing one")
    p.add_argument("--split-out", help="write the train/query/gallery split here")
    p.set_defaults(fn=cmd_train_global)

    p = sub.add_parser("train-triplet", help="train the local network (triplet loss)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--global", dest="global_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mining", choices=["hard", "semi-hard", "all"])
    p.add_argument("--P", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--split")
    p.set_defaults(fn=cmd_train_triplet)

    p = sub.add_parser("eval", help="retrieval report on the test split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--global-only", action="store_true", help="pure global descriptors (k = 0)")
    p.add_argument("--fusion", choices=["replace", "norm-matched"])
    p.add_argument("--same-camera-filter", action="store_true", default=None)
    p.add_argument("--split")
    p.add_argument("--csv", help="per-query CSV (query id, first-hit rank, AP)")
    p.add_argument("--report-dir", help="write report.txt, CSVs and CMC / rank-list figures here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attend", help="attention overlay for one image")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="overlay PPM")
    p.add_argument("--map-out", help="attention map PGM")
    p.add_argument("--k", type=int)
    p.set_defaults(fn=cmd_attend)

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_info)
    return parser


EXPECTED = (
    config.ConfigError,
    checkpoint.CheckpointError,
    dataset.DatasetError,
    netpbm.ImageFormatError,
    retrieval.ProtocolError,
    TensorError,
    FloatingPointError,
    CliError,
    OSError,
    ValueError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except EXPECTED as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"gatn {args.command}: error: {msg}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    sys.exit(main())
