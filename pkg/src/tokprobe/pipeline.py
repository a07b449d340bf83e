"""Pipeline stages behind the command line.

Every stage reads the validated run config, writes under
``<output_dir>/<config hash>/<stage>/`` and stamps each artifact with the
config hash and seed. A stage that finds its completion marker with a
matching hash is skipped unless forced.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis as an
from . import attn_norm as ba
from . import plotting
from .config import RunConfig
from .datasets import (
    TASKS,
    bigram_shift,
    build_shift_mask,
    clause_swap,
    example_rng,
    filter_coordinated,
    load_senteval_tsv,
    subsample_indices,
    word_permutation_tokens,
    write_pairs,
)
from .encoder import Encoder
from .errors import CannotPerturbError, MaskUnavailableError, TokprobeError, UndefinedCorrelationError
from .model_io import load_config, load_vocab, load_weight_archive, read_cache, write_cache
from .probe import ProbeConfig, evaluate, load_probe, save_probe, saliency_scores, train_probe
from .representations import extract_dataset
from .tokenizer import PAD, encode

log = logging.getLogger(__name__)

STAGES = (
    "prepare-data",
    "extract",
    "train-probe",
    "attribute",
    "attn-norm",
    "analyze",
    "control",
    "report",
    "export-vectors",
)

MARKER = ".complete.json"


# ---------------------------------------------------------------- output helpers


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _fmt(v, decimals=None):
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            return "nan"
        return f"{v:.{decimals}f}" if decimals is not None else repr(float(v))
    return str(v)


@dataclass
class StageResult:
    stage: str
    directory: str
    skipped: bool = False
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


class Run:
    """One configured run: lazily loads the model and shares it across stages."""

    def __init__(self, cfg: RunConfig, workers: int = 1, force: bool = False):
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.force = force
        self._encoder = None
        self._vocab = None
        self._examples = {}
        self._probes = {}

    # -- shared resources

    @property
    def seed(self):
        return int(self.cfg["seed"])

    @property
    def stamp(self):
        return {"config_hash": self.cfg.run_hash, "seed": self.seed}

    @property
    def stamp_line(self):
        return f"config_hash={self.cfg.run_hash} seed={self.seed}"

    @property
    def vocab(self):
        if self._vocab is None:
            self._vocab = load_vocab(self.cfg["paths.vocab"])
        return self._vocab

    @property
    def encoder(self):
        if self._encoder is None:
            model_cfg = load_config(self.cfg["paths.config"])
            weights = load_weight_archive(self.cfg["paths.weights"], model_cfg)
            self._encoder = Encoder(model_cfg, weights)
            if model_cfg.vocab_size != len(self.vocab):
                raise TokprobeError(
                    f"vocabulary has {len(self.vocab)} entries but the model expects {model_cfg.vocab_size}")
        return self._encoder

    @property
    def layers(self):
        return list(self.cfg["layers"])

    @property
    def strategies(self):
        out = ["mean"]
        if self.cfg["compare_cls"] or self.cfg["pooling"] == "cls":
            out.append("cls")
        return out

    def probe_config(self):
        c = self.cfg
        return ProbeConfig(
            hidden_sizes=tuple(c["probe.hidden_sizes"]),
            dropouts=tuple(float(d) for d in c["probe.dropouts"]),
            activation=c["probe.activation"],
            linear=bool(c["probe.linear"]),
            lr=float(c["probe.lr"]),
            batch_size=int(c["probe.batch_size"]),
            max_epochs=int(c["probe.max_epochs"]),
            patience=int(c["probe.patience"]),
            seed=self.seed,
        )

    def examples(self, task):
        if task not in self._examples:
            self._examples[task] = load_senteval_tsv(self.cfg.task_file(task), task)
        return self._examples[task]

    def _map(self, fn, items):
        if self.workers == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def encode(self, text):
        return encode(text, self.vocab, int(self.cfg["max_len"]), pad=False)

    def forward(self, texts, internals=False):
        """Tokenize and run texts; returns ``[(sentence, trace)]`` in input order."""
        def one(text):
            sent = self.encode(text)
            return sent, self.encoder.forward(sent, with_attention_internals=internals)
        return self._map(one, texts)

    # -- directories and markers

    def stage_dir(self, stage):
        path = os.path.join(self.cfg.run_dir, stage)
        os.makedirs(path, exist_ok=True)
        return path

    def path(self, stage, *parts):
        full = os.path.join(self.stage_dir(stage), *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def is_complete(self, stage):
        marker = os.path.join(self.cfg.run_dir, stage, MARKER)
        if not os.path.isfile(marker):
            return False
        try:
            with open(marker, encoding="utf-8") as f:
                return json.load(f).get("config_hash") == self.cfg.run_hash
        except (OSError, ValueError):
            return False

    def mark_complete(self, stage, outputs):
        rel = sorted(os.path.relpath(p, self.stage_dir(stage)) for p in outputs)
        self.write_json(os.path.join(self.stage_dir(stage), MARKER), {"stage": stage, "outputs": rel})

    def write_json(self, path, payload):
        body = dict(self.stamp)
        body.update(payload)
        text = json.dumps(_clean(body), indent=1, sort_keys=True, allow_nan=False) + "\n"
        _atomic_write(path, text.encode("utf-8"))
        return path

    def write_csv(self, path, header, rows, decimals=None):
        buf = io.StringIO()
        buf.write(f"# {self.stamp_line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v, decimals) for v in row])
        _atomic_write(path, buf.getvalue().encode("utf-8"))
        return path

    def write_jsonl(self, path, records):
        lines = [json.dumps(_clean({**self.stamp, **r}), sort_keys=True, allow_nan=False) for r in records]
        _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))
        return path

    def read_json(self, stage, *parts):
        path = os.path.join(self.cfg.run_dir, stage, *parts)
        if not os.path.isfile(path):
            raise TokprobeError(f"missing {path}; run the '{stage}' stage first")
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    # -- stage dispatch

    def run_stage(self, stage) -> StageResult:
        if stage not in STAGES:
            raise TokprobeError(f"unknown stage {stage!r}")
        directory = os.path.join(self.cfg.run_dir, stage)
        if not self.force and self.is_complete(stage):
            log.info("%s: complete for %s, skipping", stage, self.cfg.short_hash)
            return StageResult(stage, directory, skipped=True)
        log.info("%s: running (config %s)", stage, self.cfg.short_hash)
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        outputs, summary = fn()
        self.mark_complete(stage, outputs)
        return StageResult(stage, directory, outputs=outputs, summary=summary)

    def ensure(self, stage):
        if not self.is_complete(stage):
            self.run_stage(stage)

    # ------------------------------------------------------------ prepare-data

    def bshift_pairs(self):
        """Shifted twins for original-labeled test sentences of the bigram-shift task."""
        pairs, skipped = [], 0
        limit = self.cfg["bshift.max_pairs"]
        for ex in self.examples("bshift"):
            if ex.split != "te" or ex.label != "O":
                continue
            if limit is not None and len(pairs) >= limit:
                break
            try:
                text, (i, j) = bigram_shift(ex.sentence, example_rng(self.seed, ex.sentence, "bshift"))
            except CannotPerturbError:
                skipped += 1
                continue
            pairs.append({"original": ex.sentence, "perturbed": text, "swap": [i, j]})
        return pairs, skipped

    def coordinv_pairs(self):
        test = [ex for ex in self.examples("coordinv") if ex.split == "te"]
        kept, dropped = filter_coordinated(test)
        pairs = []
        for ex, cp in kept:
            _, perm = clause_swap(cp.original.split())
            pairs.append({
                "original": cp.original,
                "perturbed": cp.inverted,
                "coordinator_index": cp.coordinator_index,
                "word_perm": perm,
                "label": ex.label,
            })
        return pairs, dropped

    def stage_prepare_data(self):
        outputs, summary = [], {}
        for task in self.cfg["tasks"]:
            exs = self.examples(task)
            counts = {}
            for ex in exs:
                counts.setdefault(ex.split, {}).setdefault(str(ex.label), 0)
                counts[ex.split][str(ex.label)] += 1
            summary[task] = {"examples": len(exs), "counts": counts}
        if "bshift" in self.cfg["tasks"]:
            pairs, skipped = self.bshift_pairs()
            write_pairs(pairs, self.path("prepare-data", "bshift_pairs.tsv"),
                        self.path("prepare-data", "bshift_pairs.json"))
            outputs += [self.path("prepare-data", "bshift_pairs.tsv"), self.path("prepare-data", "bshift_pairs.json")]
            summary["bshift"].update(pairs=len(pairs), cannot_perturb=skipped)
        if "coordinv" in self.cfg["tasks"]:
            pairs, dropped = self.coordinv_pairs()
            write_pairs(pairs, self.path("prepare-data", "coordinv_pairs.tsv"),
                        self.path("prepare-data", "coordinv_pairs.json"))
            outputs += [self.path("prepare-data", "coordinv_pairs.tsv"),
                        self.path("prepare-data", "coordinv_pairs.json")]
            summary["coordinv"].update(pairs=len(pairs), filtered=dropped)
        subsamples = {}
        for task in self.cfg["control.tasks"]:
            exs = self.examples(task)
            subsamples[task] = [
                [i for i in subsample_indices(exs, float(self.cfg["control.fraction"]), an._run_seed(self.seed, r))
                 if exs[i].split == "tr"]
                for r in range(int(self.cfg["control.runs"]))
            ]
        outputs.append(self.write_json(self.path("prepare-data", "control_subsamples.json"),
                                       {"fraction": self.cfg["control.fraction"], "train_indices": subsamples}))
        outputs.append(self.write_json(self.path("prepare-data", "summary.json"), {"tasks": summary}))
        return outputs, summary

    # ------------------------------------------------------------ extract

    def cache_path(self, task):
        material = f"{self.cfg.run_hash}\x1f{task}".encode()
        name = f"{task}-{hashlib.sha256(material).hexdigest()[:16]}.tkc"
        return os.path.join(self.cfg["paths.cache_dir"], name)

    def cache(self, task):
        path = self.cache_path(task)
        if not os.path.isfile(path):
            raise TokprobeError(f"no cached representations for {task}; run 'extract' first")
        return read_cache(path)

    def stage_extract(self):
        os.makedirs(self.cfg["paths.cache_dir"], exist_ok=True)
        entries = {}
        for task in self.cfg["tasks"]:
            path = self.cache_path(task)
            if os.path.isfile(path) and not self.force:
                cache = read_cache(path)
                reused = True
            else:
                executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
                try:
                    cache = extract_dataset(self.encoder, self.vocab, self.examples(task), self.layers,
                                            pooling=self.strategies, dataset_id=task,
                                            max_len=int(self.cfg["max_len"]), executor=executor)
                finally:
                    if executor is not None:
                        executor.shutdown()
                cache.meta = {"config_hash": self.cfg.run_hash, "task": task}
                write_cache(path, cache)
                reused = False
            entries[task] = {"cache": os.path.basename(path), "sentences": len(cache.sentences),
                             "layers": cache.layers, "strategies": sorted(cache.pooled), "reused": reused}
        out = self.write_json(self.path("extract", "manifest.json"),
                              {"cache_dir_relative": False, "tasks": {t: {k: v for k, v in e.items() if k != "reused"}
                                                                      for t, e in entries.items()}})
        return [out], entries

    # ------------------------------------------------------------ train-probe

    def probe_path(self, task, strategy, layer):
        return os.path.join(self.cfg.run_dir, "train-probe", task, f"{strategy}_layer{layer:02d}.probe")

    def probe(self, task, layer, strategy="mean"):
        key = (task, layer, strategy)
        if key not in self._probes:
            path = self.probe_path(task, strategy, layer)
            if not os.path.isfile(path):
                raise TokprobeError(f"no probe for {task} layer {layer}; run 'train-probe' first")
            self._probes[key] = load_probe(path)
        return self._probes[key]

    def stage_train_probe(self):
        self.ensure("extract")
        config = self.probe_config()
        outputs, metrics = [], {}
        for task in self.cfg["tasks"]:
            spec = TASKS[task]
            cache = self.cache(task)
            metrics[task] = {}
            for strategy in self.strategies:
                metrics[task][strategy] = {}
                for layer in self.layers:
                    model = train_probe(cache, layer, config, kind=spec.kind, strategy=strategy,
                                        classes=list(spec.classes) if spec.classes else None)
                    path = self.probe_path(task, strategy, layer)
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    save_probe(model, path)
                    self._probes[(task, layer, strategy)] = model
                    outputs.append(path)
                    hidden = 0 if model.is_linear else int(model.params["W1"].shape[1])
                    metrics[task][strategy][str(layer)] = {
                        "test": evaluate(model, cache, "te"),
                        "val": evaluate(model, cache, "va"),
                        "hidden": hidden,
                        "dropout": model.dropout,
                        "epochs": len(model.history),
                    }
        outputs.append(self.write_json(self.path("train-probe", "metrics.json"), {"metrics": metrics}))
        return outputs, metrics

    # ------------------------------------------------------------ attribute

    def _limited(self, items, key):
        limit = self.cfg[key]
        return items if limit is None else items[:int(limit)]

    def attribute_task(self, task):
        spec = TASKS[task]
        test = self._limited([ex for ex in self.examples(task) if ex.split == "te"], "attribution.max_sentences")
        runs = self.forward([ex.sentence for ex in test])
        records = []
        for ex, (sent, trace) in zip(test, runs):
            per_layer = {}
            for layer in self.layers:
                model = self.probe(task, layer)
                target = None if spec.kind == "regressor" else ex.label
                res = saliency_scores(model, trace, sent, layer, target, logit=bool(self.cfg["attribution.logit"]))
                per_layer[str(layer)] = {"scores": res.token_scores, "normalized": res.normalized_abs_scores}
            records.append({"sentence": ex.sentence, "label": ex.label, "tokens": sent.tokens, "layers": per_layer})
        return records

    def stage_attribute(self):
        self.ensure("train-probe")
        outputs, summary = [], {}
        for task in self.cfg["tasks"]:
            records = self.attribute_task(task)
            outputs.append(self.write_jsonl(self.path("attribute", f"{task}.jsonl"), records))
            summary[task] = {"sentences": len(records)}
        return outputs, summary

    def attributions(self, task):
        path = os.path.join(self.cfg.run_dir, "attribute", f"{task}.jsonl")
        if not os.path.isfile(path):
            raise TokprobeError(f"missing {path}; run 'attribute' first")
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    # ------------------------------------------------------------ attn-norm

    def stage_attn_norm(self):
        if "bshift" not in self.cfg["tasks"]:
            raise TokprobeError("attn-norm needs the bshift task")
        pairs, _ = self.bshift_pairs()
        pairs = self._limited(pairs, "attn.max_pairs")
        radius = int(self.cfg["attn.window_radius"])
        num_layers = self.encoder.config.num_layers
        per_layer = {l: [] for l in range(1, num_layers + 1)}
        raw, anchors = {l: [] for l in per_layer}, []
        unaligned = 0
        for p in pairs:
            (src, tr_a), (dst, tr_b) = self.forward([p["original"], p["perturbed"]], internals=True)
            i, j = p["swap"]
            perm_words = list(range(len(p["original"].split())))
            perm_words[i], perm_words[j] = j, i
            align = word_permutation_tokens(src, dst, perm_words)
            positions = dst.positions_of_source(i)
            if align is None or not positions:
                unaligned += 1
                continue
            anchor = positions[0]
            anchors.append(anchor)
            for l in per_layer:
                d = ba.delta_beta(ba.BetaMap(l, tr_a.beta_maps[l - 1]), ba.BetaMap(l, tr_b.beta_maps[l - 1]),
                                  align, anchor)
                per_layer[l].append(d)
                raw[l].append(d.raw)
        if not anchors:
            raise TokprobeError("no alignable bigram-shift pairs for attention norms")
        averages = [ba.center_and_average(per_layer[l], radius) for l in sorted(per_layer)]
        cumul = ba.cumulative(averages, self.cfg["attn.cumulative"])
        offsets = list(range(-radius, radius + 1))
        header = ["row_offset"] + [str(o) for o in offsets]
        outputs, contrast = [], {}
        rng = np.random.default_rng([self.seed, 7])
        for avg, cum in zip(averages, cumul):
            l = avg.layer
            for name, grid in (("mean", avg.mean), ("counts", avg.counts), ("cumulative", cum)):
                rows = [[o] + list(grid[k]) for k, o in enumerate(offsets)]
                outputs.append(self.write_csv(self.path("attn-norm", f"layer{l:02d}_{name}.csv"), header, rows))
            inside, outside = ba.block_contrast(raw[l], anchors, rng)
            contrast[str(l)] = {"bigram_block": inside, "off_bigram_block": outside}
        manifest = {
            "pairs": len(anchors),
            "unaligned": unaligned,
            "window_radius": radius,
            "cumulative": self.cfg["attn.cumulative"],
            "layers": sorted(per_layer),
            "block_contrast": contrast,
        }
        outputs.append(self.write_json(self.path("attn-norm", "manifest.json"), manifest))
        return outputs, manifest

    # ------------------------------------------------------------ analyze

    def _bshift_analysis(self):
        pairs, _ = self.bshift_pairs()
        layers = self.layers
        variants = ("signed", "abs")
        rho = {v: {"original": {l: [] for l in layers}, "shifted": {l: [] for l in layers}} for v in variants}
        curves_m, curves_o = [], []
        skipped = {"mask": 0, "constant": 0, "unaligned": 0}
        logit = bool(self.cfg["attribution.logit"])
        for p in pairs:
            (src, tr_a), (dst, tr_b) = self.forward([p["original"], p["perturbed"]])
            try:
                masks = {"original": build_shift_mask(src, p["swap"]), "shifted": build_shift_mask(dst, p["swap"])}
            except MaskUnavailableError:
                skipped["mask"] += 1
                continue
            for l in layers:
                model = self.probe("bshift", l)
                for side, sent, trace, target in (("original", src, tr_a, "O"), ("shifted", dst, tr_b, "I")):
                    res = saliency_scores(model, trace, sent, l, target, logit=logit)
                    for v in variants:
                        try:
                            rho[v][side][l].append(an.mask_correlation(res.token_scores, masks[side], sent.is_special,
                                                                       use_abs=v == "abs"))
                        except UndefinedCorrelationError:
                            skipped["constant"] += 1
            i, j = p["swap"]
            perm = list(range(len(p["original"].split())))
            perm[i], perm[j] = j, i
            align = word_permutation_tokens(src, dst, perm)
            if align is None:
                skipped["unaligned"] += 1
                continue
            real = src.real_positions
            marked = [bool(masks["original"].mask[p_]) for p_ in real]
            special = [src.is_special[p_] for p_ in real]
            d = an.token_self_distance(tr_a.hidden_states[:, real], tr_b.hidden_states, align, marked, special)
            curves_m.append(d.marked)
            curves_o.append(d.other)

        def means(table):
            return {side: {str(l): (float(np.mean(v)) if v else None) for l, v in per.items()}
                    for side, per in table.items()}

        primary = "abs" if self.cfg["mask.use_abs"] else "signed"
        return {
            "pairs": len(pairs),
            "skipped": skipped,
            "primary": primary,
            "mask_rho": means(rho[primary]),
            "mask_rho_signed": means(rho["signed"]),
            "mask_rho_abs": means(rho["abs"]),
            "self_distance": {"layers": list(range(self.encoder.config.num_layers + 1)),
                              "shifted_tokens": an.mean_curves(curves_m), "other_tokens": an.mean_curves(curves_o)},
        }

    def _coordinv_analysis(self):
        pairs, dropped = self.coordinv_pairs()
        curves_m, curves_o = [], []
        unaligned = 0
        for p in pairs:
            (src, tr_a), (dst, tr_b) = self.forward([p["original"], p["perturbed"]])
            align = word_permutation_tokens(src, dst, p["word_perm"])
            if align is None:
                unaligned += 1
                continue
            real = src.real_positions
            coord = set(src.positions_of_source(p["coordinator_index"]))
            marked = [p_ in coord for p_ in real]
            special = [src.is_special[p_] for p_ in real]
            d = an.token_self_distance(tr_a.hidden_states[:, real], tr_b.hidden_states, align, marked, special)
            curves_m.append(d.marked)
            curves_o.append(d.other)
        saliency = {}
        for rec in self.attributions("coordinv"):
            for l, entry in rec["layers"].items():
                vals = [s for t, s in zip(rec["tokens"], entry["normalized"]) if t in ("and", "but")]
                if vals:
                    saliency.setdefault(l, []).append(float(np.mean(vals)))
        return {
            "pairs": len(pairs),
            "filtered": dropped,
            "unaligned": unaligned,
            "self_distance": {"layers": list(range(self.encoder.config.num_layers + 1)),
                              "coordinator": an.mean_curves(curves_m), "other_tokens": an.mean_curves(curves_o)},
            "coordinator_saliency": {l: float(np.mean(v)) for l, v in sorted(saliency.items(), key=lambda kv: int(kv[0]))},
        }

    def _top_tokens(self, task):
        records = self.attributions(task)
        freq = an.token_frequencies(r["tokens"] for r in records)
        rows = ((int(l), r["tokens"], e["normalized"]) for r in records for l, e in r["layers"].items())
        table = an.aggregate_top_tokens(rows, int(self.cfg["top_tokens.min_freq"]), int(self.cfg["top_tokens.k"]),
                                        frequencies=freq)
        return {str(l): [[t, s, c] for t, s, c in v] for l, v in table.per_layer.items()}

    def stage_analyze(self):
        self.ensure("attribute")
        outputs, result = [], {}
        if "bshift" in self.cfg["tasks"]:
            result["bshift"] = self._bshift_analysis()
            outputs.append(self.write_json(self.path("analyze", "bshift.json"), result["bshift"]))
            b = result["bshift"]
            rows = [[l] + [b[key][side][str(l)] for key in ("mask_rho_signed", "mask_rho_abs")
                           for side in ("original", "shifted")] for l in self.layers]
            outputs.append(self.write_csv(self.path("analyze", "bshift_mask_rho.csv"),
                                          ["layer", "signed_original", "signed_shifted", "abs_original", "abs_shifted"],
                                          rows))
        if "coordinv" in self.cfg["tasks"]:
            result["coordinv"] = self._coordinv_analysis()
            outputs.append(self.write_json(self.path("analyze", "coordinv.json"), result["coordinv"]))
        top = {task: self._top_tokens(task) for task in self.cfg["tasks"]}
        result["top_tokens"] = top
        outputs.append(self.write_json(self.path("analyze", "top_tokens.json"),
                                       {"min_freq": self.cfg["top_tokens.min_freq"], "k": self.cfg["top_tokens.k"],
                                        "tables": top}))
        rows = [[task, l, rank + 1, t, s, c]
                for task, per in top.items() for l, entries in per.items() for rank, (t, s, c) in enumerate(entries)]
        outputs.append(self.write_csv(self.path("analyze", "top_tokens.csv"),
                                      ["task", "layer", "rank", "token", "mean_saliency", "count"], rows))
        return outputs, {k: v for k, v in result.items() if k != "top_tokens"}

    # ------------------------------------------------------------ control

    def stage_control(self):
        self.ensure("train-probe")
        config = self.probe_config()
        outputs, summary = [], {}
        rows = []
        for task in self.cfg["control.tasks"]:
            spec = TASKS[task]
            cache = self.cache(task)
            exs = self.examples(task)
            features = {l: cache.pooled["mean"][:, cache.layer_slot(l)] for l in self.layers}
            test = self._limited([ex for ex in exs if ex.split == "te"], "attribution.max_sentences")
            items = [(s, t, None if spec.kind == "regressor" else ex.label)
                     for ex, (s, t) in zip(test, self.forward([ex.sentence for ex in test]))]
            full = {l: self.probe(task, l) for l in self.layers}
            res, _ = an.control_experiment(
                exs, features, items, self.layers, kind=spec.kind, config=config,
                fraction=float(self.cfg["control.fraction"]), runs=int(self.cfg["control.runs"]), seed=self.seed,
                classes=list(spec.classes) if spec.classes else None, full_probes=full,
                max_over=self.cfg["control.max_over"], logit=bool(self.cfg["attribution.logit"]))
            summary[task] = {
                "pearson_mean": res.pearson_mean, "pearson_max": res.pearson_max,
                "spearman_mean": res.spearman_mean, "spearman_max": res.spearman_max,
                "per_layer_pearson": {str(k): v for k, v in res.per_layer_pearson.items()},
                "per_layer_spearman": {str(k): v for k, v in res.per_layer_spearman.items()},
                "runs": res.runs, "skipped_sentences": res.skipped, "test_sentences": len(items),
            }
            rows.append([task, res.pearson_mean, res.pearson_max, res.spearman_mean, res.spearman_max])
        outputs.append(self.write_json(self.path("control", "control.json"),
                                       {"fraction": self.cfg["control.fraction"], "max_over": self.cfg["control.max_over"],
                                        "tasks": summary}))
        outputs.append(self.write_csv(self.path("control", "control.csv"),
                                      ["task", "pearson_mean", "pearson_max", "spearman_mean", "spearman_max"], rows, 2))
        return outputs, summary

    # ------------------------------------------------------------ report

    def stage_report(self):
        for stage in ("train-probe", "attribute", "analyze", "control"):
            self.ensure(stage)
        metrics = self.read_json("train-probe", "metrics.json")["metrics"]
        tasks = self.cfg["tasks"]
        layers = self.layers
        outputs = []

        missing = [f"{t}/{st}/layer {l}" for t in tasks for st in self.strategies for l in layers
                   if str(l) not in metrics.get(t, {}).get(st, {}) or not os.path.isfile(self.probe_path(t, st, l))]
        if missing:
            raise TokprobeError(f"missing probes: {', '.join(missing)}")

        def acc(task, strategy, layer):
            return metrics[task][strategy][str(layer)]["test"]["accuracy"]

        series = {t: an.LayerSeries(t, "accuracy", [acc(t, "mean", l) for l in layers]) for t in tasks}
        outputs.append(self.write_csv(self.path("report", "layer_accuracy.csv"), ["layer"] + tasks,
                                      [[l] + [series[t].values[k] for t in tasks] for k, l in enumerate(layers)], 2))
        full = {t: {str(l): metrics[t]["mean"][str(l)]["test"] for l in layers} for t in tasks}
        deltas = {}
        if "cls" in self.strategies:
            deltas = {t: [acc(t, "mean", l) - acc(t, "cls", l) for l in layers] for t in tasks}
            outputs.append(self.write_csv(self.path("report", "mean_vs_cls.csv"), ["layer"] + tasks,
                                          [[l] + [deltas[t][k] for t in tasks] for k, l in enumerate(layers)], 2))
            for t in tasks:
                for l in layers:
                    full[t][str(l)]["cls_accuracy"] = acc(t, "cls", l)
        outputs.append(self.write_json(self.path("report", "layer_accuracy.json"),
                                       {"layers": layers, "tasks": full, "mean_minus_cls": deltas}))

        analysis = {}
        for name in ("bshift", "coordinv"):
            if name in tasks:
                analysis[name] = self.read_json("analyze", f"{name}.json")
        top = self.read_json("analyze", "top_tokens.json")
        control = self.read_json("control", "control.json")
        summary = {"analysis": {k: {kk: vv for kk, vv in v.items() if kk not in ("config_hash", "seed")}
                                for k, v in analysis.items()},
                   "top_tokens": top["tables"], "control": control["tasks"]}
        if self.is_complete("attn-norm"):
            summary["attn_norm"] = {k: v for k, v in self.read_json("attn-norm", "manifest.json").items()
                                    if k not in ("config_hash", "seed")}
        outputs.append(self.write_json(self.path("report", "summary.json"), summary))

        stamp = self.stamp_line
        fig = self.path("report", "accuracy.png")
        plotting.layer_curves(fig, {t: (layers, series[t].values) for t in tasks}, "probe accuracy (mean pooling)",
                              "test accuracy", stamp, ylim=(0, 1.02))
        outputs.append(fig)
        if deltas:
            fig = self.path("report", "mean_vs_cls.png")
            plotting.delta_bars(fig, layers, deltas, stamp)
            outputs.append(fig)
        if "bshift" in analysis:
            b = analysis["bshift"]
            fig = self.path("report", "bshift_mask_rho.png")
            plotting.layer_curves(fig, {side: (layers, [b["mask_rho"][side][str(l)] or 0.0 for l in layers])
                                        for side in ("original", "shifted")},
                                  "saliency vs shifted-bigram mask", "Spearman rho", stamp)
            outputs.append(fig)
            sd = b["self_distance"]
            fig = self.path("report", "bshift_self_distance.png")
            plotting.layer_curves(fig, {"shifted tokens": (sd["layers"], _nan0(sd["shifted_tokens"])),
                                        "other tokens": (sd["layers"], _nan0(sd["other_tokens"]))},
                                  "bigram shift: self cosine distance", "cosine distance", stamp)
            outputs.append(fig)
        if "coordinv" in analysis:
            c = analysis["coordinv"]
            sd = c["self_distance"]
            fig = self.path("report", "coordinv_self_distance.png")
            plotting.layer_curves(fig, {"coordinator": (sd["layers"], _nan0(sd["coordinator"])),
                                        "other tokens": (sd["layers"], _nan0(sd["other_tokens"]))},
                                  "coordination inversion: self cosine distance", "cosine distance", stamp)
            outputs.append(fig)
        for task, table in top["tables"].items():
            if table:
                fig = self.path("report", f"top_tokens_{task}.png")
                plotting.top_token_bars(fig, {int(l): v for l, v in table.items()}, f"{task}: most salient tokens",
                                        stamp)
                outputs.append(fig)
        return outputs, {"layer_accuracy": {t: series[t].values for t in tasks}}

    # ------------------------------------------------------------ export-vectors

    def stage_export_vectors(self):
        wanted = set(self.cfg["export.tokens"])
        outputs, counts = [], {}
        for task in self.cfg["tasks"]:
            test = [ex for ex in self.examples(task) if ex.split == "te"]
            limit = self.cfg["export.max_sentences"]
            if limit is not None:
                test = test[:int(limit)]
            buf = io.StringIO()
            buf.write(f"# {self.stamp_line}\n")
            buf.write("token\tlayer\tlabel\tvector\n")
            n = 0
            for ex, (sent, trace) in zip(test, self.forward([ex.sentence for ex in test])):
                for pos, tok in enumerate(sent.tokens):
                    if tok not in wanted or tok == PAD:
                        continue
                    for l in self.layers:
                        vec = " ".join(f"{v:.6g}" for v in trace.hidden_states[l][pos])
                        buf.write(f"{tok}\t{l}\t{ex.label}\t{vec}\n")
                        n += 1
            path = self.path("export-vectors", f"{task}.tsv")
            _atomic_write(path, buf.getvalue().encode("utf-8"))
            outputs.append(path)
            counts[task] = n
        return outputs, {"rows": counts}


def _nan0(values):
    return [0.0 if v is None else v for v in values]


def run_stages(cfg: RunConfig, stages, workers=1, force=False):
    run = Run(cfg, workers=workers, force=force)
    return [run.run_stage(s) for s in stages]
