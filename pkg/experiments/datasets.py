"""
Dataset Manifests
-----------------
Datasets on disk are a CSV manifest with one row per utterance plus one
feature container per utterance:

    id, tokens, feature_path, num_frames, duration_seconds

tokens are space-separated label ids; feature_path is relative to the
manifest's directory.
"""

import logging
import os

import pandas as pd

from core.data_synth import generate_dataset
from core.errors import UsageError
from core.rng import derive_seed
from experiments.checkpoint import load_features, save_features

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["id", "tokens", "feature_path", "num_frames", "duration_seconds"]


def write_dataset(utterances, directory, name="dataset"):
    """
    Store utterances under directory and write their manifest.

    Args:
        utterances (list): Utterances to store.
        directory (str): Output directory, created if missing.
        name (str): Manifest name (written as <name>.csv).

    Returns:
        str: Manifest path.
    """
    if not utterances:
        raise UsageError("Cannot write an empty dataset")
    feature_dir = os.path.join(directory, f"{name}_features")
    os.makedirs(feature_dir, exist_ok=True)
    rows = []
    for utt in utterances:
        relative = os.path.join(f"{name}_features", f"{utt.utt_id}.feat")
        save_features(utt, os.path.join(directory, relative))
        rows.append({
            "id": utt.utt_id,
            "tokens": " ".join(str(k) for k in utt.tokens),
            "feature_path": relative,
            "num_frames": utt.num_frames,
            "duration_seconds": utt.duration_seconds,
        })
    manifest = os.path.join(directory, f"{name}.csv")
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False)
    logger.info(f"Wrote {len(rows)} utterances to {manifest}")
    return manifest


def read_manifest(manifest):
    """Manifest as a DataFrame with tokens parsed to tuples."""
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"Manifest not found: {manifest}")
    df = pd.read_csv(manifest, dtype={"id": str, "tokens": str}, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise UsageError(f"Manifest {manifest} is missing columns {missing}")
    df["tokens"] = df["tokens"].map(lambda s: tuple(int(k) for k in s.split()))
    return df


def load_dataset(manifest):
    """
    Load every utterance listed in a manifest.

    Returns:
        list: Utterances in manifest order.

    Raises:
        UsageError: If the manifest is empty or disagrees with a feature file.
    """
    df = read_manifest(manifest)
    if df.empty:
        raise UsageError(f"Manifest {manifest} lists no utterances")
    base = os.path.dirname(os.path.abspath(manifest))
    utterances = []
    for row in df.itertuples(index=False):
        utt = load_features(os.path.join(base, row.feature_path))
        if utt.utt_id != row.id or tuple(utt.tokens) != row.tokens:
            raise UsageError(f"Feature file {row.feature_path} does not match manifest row {row.id}")
        utterances.append(utt)
    logger.info(f"Loaded {len(utterances)} utterances from {manifest}")
    return utterances


def generate_splits(task, seed, output_dir):
    """
    Generate and store the train and eval splits of a task.

    Args:
        task (TaskConfig): Task and split sizes.
        seed (int): Dataset seed; the eval split uses a derived stream.
        output_dir (str): Directory for manifests and features.

    Returns:
        dict: Split name -> manifest path.
    """
    spec = task.synth_spec()
    lengths = (task.min_tokens, task.max_tokens)
    splits = {
        "train": generate_dataset(spec, task.train_utterances, seed, *lengths, prefix="train"),
        "eval": generate_dataset(spec, task.eval_utterances, derive_seed(seed, "eval"), *lengths, prefix="eval"),
    }
    return {name: write_dataset(utts, output_dir, name) for name, utts in splits.items()}
