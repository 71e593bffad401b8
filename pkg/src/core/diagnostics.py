# diagnostics.py
"""
Read-only measurements of a trained decoder.

attention_locality  where each query position puts its attention mass (condition,
                    grid neighbours of the token it predicts, everything else)
probe_per_step      linear-probe accuracy of unconditional features per step
view_invariance     how much tokens and features move between augmented views
render_report       CSV tables and SVG charts of the three
"""
import csv
import logging
import math
import os
from dataclasses import dataclass

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.figure import Figure

from . import numerics, seeding
from .data_toy import quantize, token_invariance
from .errors import TraceLevelError, UsageError
from .model import tap

logger = logging.getLogger(__name__)

LOCALITY_FIELDS = ("run", "layer", "step", "mass_on_condition", "mass_on_neighbors", "mass_elsewhere", "mean_distance")
PROBE_FIELDS = ("run", "layer", "epochs", "step", "accuracy")
INVARIANCE_FIELDS = ("run", "token_change_rate", "feature_cosine")

matplotlib.rcParams["svg.hashsalt"] = "star-report"


@dataclass
class LocalityProfile:
    """
    Arrays are [layers, T]; column t is query row t, which predicts token t+1
    (step t+1, 1-indexed).
    """
    mass_on_condition: np.ndarray
    mass_on_neighbors: np.ndarray
    mass_elsewhere: np.ndarray
    mean_distance: np.ndarray
    mean_attention: np.ndarray  # [layers, T, T], head and trace mean
    grid_side: int
    traces: int

    @property
    def layers(self):
        return self.mass_on_condition.shape[0]

    @property
    def length(self):
        return self.mass_on_condition.shape[1]


@dataclass
class ProbeReport:
    accuracies: dict  # step (1-indexed) -> top-1 accuracy
    steps: list
    layer: int
    epochs: int
    num_classes: int
    train_size: int = 0
    test_size: int = 0

    @property
    def chance(self):
        return 1.0 / self.num_classes


def _grid_cells(length, grid_side):
    # key j >= 1 holds token x_j, whose grid cell is j - 1; query row t predicts cell t
    cells = np.arange(length)
    return cells // grid_side, cells % grid_side


def bucket_geometry(length, grid_side):
    """
    Partition of the key columns seen by every query row.

    :return: (neighbor [T, T] bool, elsewhere [T, T] bool, distance [T, T] float)
        where column 0 (the condition) is in neither boolean mask.
    """
    if length != grid_side * grid_side:
        raise UsageError(f"sequence length {length} is not a {grid_side}x{grid_side} grid")
    rows, cols = _grid_cells(length, grid_side)
    query_r, query_c = rows[:, None], cols[:, None]
    key_r = np.concatenate([[0], rows[:-1]])[None, :]
    key_c = np.concatenate([[0], cols[:-1]])[None, :]
    chebyshev = np.maximum(np.abs(query_r - key_r), np.abs(query_c - key_c))
    distance = np.sqrt((query_r - key_r) ** 2 + (query_c - key_c) ** 2).astype(np.float64)

    t = np.arange(length)
    visible = t[None, :] <= t[:, None]
    token_key = np.arange(length)[None, :] >= 1
    neighbor = visible & token_key & (chebyshev <= 1)
    elsewhere = visible & token_key & ~neighbor
    distance[:, 0] = 0.0
    return neighbor, elsewhere, distance


def attention_locality(traces, grid_side):
    """
    Averages head-mean attention into condition / neighbour / elsewhere masses per
    layer and query row, over every sample of every trace.

    The mean distance is the attention-weighted Euclidean grid distance between the
    predicted cell and the attended token cells, normalized by the mass on tokens
    (0 for rows that attend only to the condition).
    """
    totals, count = None, 0
    for trace in traces:
        if trace.trace_level != "full" or trace.attentions is None:
            raise TraceLevelError("attention locality needs traces recorded with trace_level='full'")
        maps = torch.stack([a.detach().double().mean(dim=1) for a in trace.attentions], dim=1)  # [B, L, T, T]
        summed = maps.sum(dim=0).numpy()
        totals = summed if totals is None else totals + summed
        count += maps.shape[0]
    if not count:
        raise UsageError("attention locality needs at least one trace")

    mean_attention = totals / count
    layers, length, _ = mean_attention.shape
    neighbor, elsewhere, distance = bucket_geometry(length, grid_side)
    condition = mean_attention[:, :, 0]
    on_neighbors = (mean_attention * neighbor).sum(axis=-1)
    on_elsewhere = (mean_attention * elsewhere).sum(axis=-1)
    token_mass = 1.0 - condition
    weighted = (mean_attention * distance).sum(axis=-1)
    mean_distance = np.divide(weighted, token_mass, out=np.zeros_like(weighted), where=token_mass > 1e-12)
    return LocalityProfile(condition, on_neighbors, on_elsewhere, mean_distance, mean_attention, int(grid_side), count)


@torch.no_grad()
def collect_traces(model, sequences, batch_size=32, null_condition=False):
    """Full forward traces of `sequences` (TokenSequences) in batches."""
    model.eval()
    traces = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        tokens = torch.from_numpy(np.stack([s.tokens for s in chunk])).long()
        if null_condition:
            conditions = torch.full((len(chunk),), model.config.null_id, dtype=torch.long)
        else:
            conditions = torch.tensor([s.condition for s in chunk])
        traces.append(model(tokens, conditions, trace_level="full"))
    return traces


def summarize_profile(profile):
    """Final-layer masses and distance averaged over query rows 1..T-1."""
    last = profile.layers - 1
    rows = slice(1, profile.length)
    return {
        "mean_distance": float(profile.mean_distance[last, rows].mean()),
        "mass_on_condition": float(profile.mass_on_condition[last, rows].mean()),
        "mass_on_neighbors": float(profile.mass_on_neighbors[last, rows].mean()),
        "mass_elsewhere": float(profile.mass_elsewhere[last, rows].mean()),
    }


def fit_linear_probe(train_x, train_y, test_x, test_y, num_classes, epochs=90, lr=0.1,
                     weight_decay=1e-4, seed=0):
    """
    Full-batch multinomial logistic regression on standardized features.

    Standardization uses the train split's statistics only.

    :return: top-1 accuracy on the test split
    """
    train_x = torch.as_tensor(train_x, dtype=torch.float64)
    test_x = torch.as_tensor(test_x, dtype=torch.float64)
    train_y = torch.as_tensor(train_y, dtype=torch.long)
    test_y = torch.as_tensor(test_y, dtype=torch.long)
    if not len(train_x) or not len(test_x):
        raise UsageError("linear probe needs non-empty train and test splits")

    mean = train_x.mean(dim=0)
    std = train_x.std(dim=0, unbiased=False).clamp(min=1e-6)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std

    generator = seeding.torch_generator(seed, seeding.PROBE, "init")
    weight = (torch.randn(train_x.shape[1], num_classes, generator=generator, dtype=torch.float64) * 0.01)
    weight.requires_grad_(True)
    bias = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.SGD([weight, bias], lr=lr, momentum=0.9, weight_decay=weight_decay)
    for _ in range(epochs):
        optimizer.zero_grad(set_to_none=True)
        loss = F.cross_entropy(train_x @ weight + bias, train_y)
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        predicted = (test_x @ weight + bias).argmax(dim=-1)
    return float((predicted == test_y).double().mean())


def split_indices(count, train_fraction, seed):
    order = seeding.numpy_rng(seed, seeding.PROBE, "split").permutation(count)
    cut = int(round(count * train_fraction))
    if not 0 < cut < count:
        raise UsageError(f"train fraction {train_fraction} leaves an empty split of {count} samples")
    return order[:cut], order[cut:]


@torch.no_grad()
def step_features(model, sequences, layer, steps, batch_size=64):
    """
    Layer-`layer` hidden states at each step, with the condition forced to the null id.

    Step s (1-indexed) is read at query row s - 1, which has seen x_1..x_{s-1}.
    :return: dict step -> [N, D] numpy array
    """
    length = model.config.seq_len
    for s in steps:
        if not 1 <= s <= length:
            raise UsageError(f"probe step {s} outside [1, {length}]")
    positions = [s - 1 for s in steps]
    model.eval()
    chunks = []
    for trace in collect_traces(model, sequences, batch_size, null_condition=True):
        chunks.append(tap(trace, layer, positions).numpy())
    features = np.concatenate(chunks, axis=0)  # [N, K, D]
    return {s: features[:, i, :] for i, s in enumerate(steps)}


def probe_per_step(model, sequences, steps, layer, epochs=90, seed=0, lr=0.1, weight_decay=1e-4,
                   train_fraction=0.8, labels=None):
    """
    One linear probe per selected step on frozen, unconditional features.

    :param sequences: TokenSequences whose condition is the class label.
    :param labels: Optional replacement labels (a permutation gives the leakage check).
    :return: ProbeReport
    """
    labels = np.asarray([s.condition for s in sequences] if labels is None else labels, dtype=np.int64)
    num_classes = model.config.num_classes
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError("probe labels must be real classes, not the null condition")
    features = step_features(model, sequences, layer, steps)
    train, test = split_indices(len(sequences), train_fraction, seed)
    accuracies = {}
    for s in steps:
        x = features[s]
        accuracies[s] = fit_linear_probe(x[train], labels[train], x[test], labels[test], num_classes,
                                         epochs=epochs, lr=lr, weight_decay=weight_decay,
                                         seed=seeding.derive_seed(seed, "step", s))
        logger.debug("probe step %d: accuracy %.4f", s, accuracies[s])
    return ProbeReport(accuracies, list(steps), int(layer), int(epochs), num_classes, len(train), len(test))


@torch.no_grad()
def view_invariance(pairs, codebook, patch_side, model=None, layer=None):
    """
    token_change_rate: mean fraction of positions whose token changes between the
    first view and every other view. feature_cosine: mean cosine similarity of
    layer-`layer` features at matched positions (None without a model).
    """
    if not pairs:
        raise UsageError("view invariance needs at least one augmented pair")
    if model is not None and layer is None:
        layer = model.config.tap_depth
    change_rates, cosines = [], []
    for pair in pairs:
        if len(pair.views) < 2:
            raise UsageError("view invariance needs at least 2 views per pair")
        sequences = [quantize(view, codebook, patch_side) for view in pair.views]
        change_rates.extend(token_invariance(sequences[0], other) for other in sequences[1:])
        if model is not None:
            model.eval()
            tokens = torch.from_numpy(np.stack([s.tokens for s in sequences])).long()
            conditions = torch.full((len(sequences),), pair.class_label, dtype=torch.long)
            hidden = model(tokens, conditions).hidden_states[layer - 1].double()
            for other in hidden[1:]:
                cosines.append(float((1.0 - numerics.cosine_distance(hidden[0], other)).mean()))
    return {
        "token_change_rate": float(np.mean(change_rates)),
        "feature_cosine": float(np.mean(cosines)) if cosines else None,
    }


def compare_runs(baseline, star):
    """
    Directional verdicts between two run summaries.

    Each summary may carry "locality" (summarize_profile), "probe" ({step: accuracy})
    and "invariance" (view_invariance) entries; claims whose inputs are missing are skipped.
    :return: list of {claim, baseline, star, holds}
    """
    verdicts = []

    def add(claim, base_value, star_value, holds):
        verdicts.append({"claim": claim, "baseline": base_value, "star": star_value, "holds": bool(holds)})

    if "locality" in baseline and "locality" in star:
        b, s = baseline["locality"], star["locality"]
        add("final-layer mean attention distance is larger", b["mean_distance"], s["mean_distance"],
            s["mean_distance"] > b["mean_distance"])
        add("final-layer mass_elsewhere is larger", b["mass_elsewhere"], s["mass_elsewhere"],
            s["mass_elsewhere"] > b["mass_elsewhere"])
    if "probe" in baseline and "probe" in star:
        steps = sorted(set(baseline["probe"]) & set(star["probe"]))
        wins = sum(star["probe"][k] >= baseline["probe"][k] for k in steps)
        add("probe accuracy >= baseline at >= 3/4 of the steps", f"{len(steps)} steps", f"{wins} wins",
            steps and wins >= math.ceil(0.75 * len(steps)))
        if len(steps) > 2:
            mid_peak = max(star["probe"][k] for k in steps[:-2])
            late = min(star["probe"][k] for k in steps[-2:])
            add("late-step accuracy stays within 5 points of the mid-step peak", mid_peak, late,
                late >= mid_peak - 0.05)
    if "invariance" in baseline and "invariance" in star:
        b, s = baseline["invariance"], star["invariance"]
        if b.get("feature_cosine") is not None and s.get("feature_cosine") is not None:
            add("inter-view feature cosine is higher", b["feature_cosine"], s["feature_cosine"],
                s["feature_cosine"] > b["feature_cosine"])
        add("tokenizer changes > 20% of tokens across views", b["token_change_rate"], s["token_change_rate"],
            s["token_change_rate"] > 0.2)
    return verdicts


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def _heatmap(matrix, title, path):
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    image = ax.imshow(matrix, cmap="viridis", vmin=0.0, interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    fig.colorbar(image, ax=ax)
    _save_svg(fig, path)


def _line_chart(series, title, xlabel, ylabel, path):
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for name in sorted(series):
        xs, ys = series[name]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series:
        ax.legend()
    _save_svg(fig, path)


def render_report(profiles, probes, invariances, out_dir):
    """
    Writes locality.csv, probe.csv and invariance.csv plus SVG charts into out_dir.

    :param profiles: dict run name -> LocalityProfile
    :param probes: dict run name -> ProbeReport
    :param invariances: dict run name -> view_invariance record
    :return: sorted list of written paths
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    locality_rows = []
    for run in sorted(profiles):
        p = profiles[run]
        for layer in range(p.layers):
            for t in range(p.length):
                locality_rows.append({
                    "run": run, "layer": layer + 1, "step": t + 1,
                    "mass_on_condition": float(p.mass_on_condition[layer, t]),
                    "mass_on_neighbors": float(p.mass_on_neighbors[layer, t]),
                    "mass_elsewhere": float(p.mass_elsewhere[layer, t]),
                    "mean_distance": float(p.mean_distance[layer, t]),
                })
            path = os.path.join(out_dir, f"attention_{run}_layer{layer + 1}.svg")
            _heatmap(p.mean_attention[layer], f"{run}: layer {layer + 1} attention", path)
            written.append(path)
    probe_rows = [
        {"run": run, "layer": probes[run].layer, "epochs": probes[run].epochs, "step": s,
         "accuracy": float(probes[run].accuracies[s])}
        for run in sorted(probes) for s in probes[run].steps
    ]
    invariance_rows = [
        {"run": run, "token_change_rate": float(invariances[run]["token_change_rate"]),
         "feature_cosine": "" if invariances[run]["feature_cosine"] is None
         else float(invariances[run]["feature_cosine"])}
        for run in sorted(invariances)
    ]
    for name, fields, rows in (("locality.csv", LOCALITY_FIELDS, locality_rows),
                               ("probe.csv", PROBE_FIELDS, probe_rows),
                               ("invariance.csv", INVARIANCE_FIELDS, invariance_rows)):
        path = os.path.join(out_dir, name)
        _write_csv(path, fields, rows)
        written.append(path)

    if profiles:
        distance = {run: (np.arange(2, p.length + 1), p.mean_distance[-1, 1:]) for run, p in profiles.items()}
        path = os.path.join(out_dir, "locality_distance.svg")
        _line_chart(distance, "final-layer mean attention distance", "step", "grid units", path)
        written.append(path)
    if probes:
        accuracy = {run: (r.steps, [r.accuracies[s] for s in r.steps]) for run, r in probes.items()}
        path = os.path.join(out_dir, "probe.svg")
        _line_chart(accuracy, "linear probe accuracy per step", "step", "top-1 accuracy", path)
        written.append(path)
    logger.info("wrote %d report files to %s", len(written), out_dir)
    return sorted(written)


def read_csv(path):
    """Rows of a report CSV as dicts of strings."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def profile_to_dict(profile):
    return {
        "mass_on_condition": profile.mass_on_condition.tolist(),
        "mass_on_neighbors": profile.mass_on_neighbors.tolist(),
        "mass_elsewhere": profile.mass_elsewhere.tolist(),
        "mean_distance": profile.mean_distance.tolist(),
        "mean_attention": profile.mean_attention.tolist(),
        "grid_side": profile.grid_side,
        "traces": profile.traces,
        "summary": summarize_profile(profile),
    }


def profile_from_dict(payload):
    arrays = {key: np.asarray(payload[key], dtype=np.float64)
              for key in ("mass_on_condition", "mass_on_neighbors", "mass_elsewhere", "mean_distance", "mean_attention")}
    return LocalityProfile(grid_side=int(payload["grid_side"]), traces=int(payload["traces"]), **arrays)


def probe_to_dict(report):
    return {
        "accuracies": {str(s): a for s, a in report.accuracies.items()},
        "steps": list(report.steps),
        "layer": report.layer,
        "epochs": report.epochs,
        "num_classes": report.num_classes,
        "train_size": report.train_size,
        "test_size": report.test_size,
    }


def probe_from_dict(payload):
    accuracies = {int(s): float(a) for s, a in payload["accuracies"].items()}
    return ProbeReport(accuracies, [int(s) for s in payload["steps"]], int(payload["layer"]), int(payload["epochs"]),
                       int(payload["num_classes"]), int(payload.get("train_size", 0)), int(payload.get("test_size", 0)))
