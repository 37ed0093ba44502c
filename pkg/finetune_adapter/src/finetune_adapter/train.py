"""Adapter training over emitted recall/reason tuning datasets.

Consumes the dataset directory produced by the emitter (recall.jsonl,
reason.jsonl, manifest.json, training_config.json) verbatim. Training
interleaves both tasks 1:1 by shuffling the combined instance list each
epoch and minimizes the token-level negative log-likelihood of each
completion given its prompt. The per-instance loss is the *sum* of
completion-token NLLs, so for a single-sequence instance it coincides
with the sequence negative log-likelihood a scoring client computes.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .model import ModelConfig, TinyCausalLM
from .tokenizer import Tokenizer


class ManifestMismatch(ValueError):
    """Dataset files do not agree with the emitter manifest."""


@dataclass
class AdapterRun:
    """Resolved configuration and append-only loss log of one run."""

    hyperparams: dict
    manifest: dict
    checkpoint_path: Optional[Path] = None
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def load_dataset(data_dir: str | Path) -> tuple[list[dict], dict, dict]:
    """Load instances, manifest, and training-config sidecar, checking
    file counts against the manifest."""
    data = Path(data_dir)
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    config = json.loads(
        (data / manifest["files"]["training_config"]).read_text(
            encoding="utf-8"))

    instances: list[dict] = []
    for task, count_key in (("recall", "recall_emitted"),
                            ("reason", "reason_emitted")):
        path = data / manifest["files"][task]
        if not path.exists():
            raise ManifestMismatch(f"manifest names missing file '{path}'")
        rows = [json.loads(line) for line in
                path.read_text(encoding="utf-8").splitlines() if line.strip()]
        expected = manifest["counts"][count_key]
        if len(rows) != expected:
            raise ManifestMismatch(
                f"{path.name}: {len(rows)} instances, manifest says {expected}")
        instances.extend(rows)
    return instances, manifest, config


def build_tokenizer(instances: list[dict]) -> Tokenizer:
    return Tokenizer.from_texts(
        inst["prompt"] + " " + inst["completion"] for inst in instances)


def instance_nll(model: TinyCausalLM, tokenizer: Tokenizer, prompt: str,
                 completion: str) -> float:
    """Total completion NLL given the prompt, in nats."""
    enc, start = tokenizer.encode_pair(prompt, completion)
    logps = model.token_logprobs(list(enc.ids))
    return -sum(logps[start:])


def _batch_loss(model: TinyCausalLM, batch: list[tuple[list[int], int]]
                ) -> torch.Tensor:
    """Mean per-instance completion NLL over one padded batch."""
    max_len = max(len(ids) for ids, _ in batch)
    ids = torch.zeros(len(batch), max_len, dtype=torch.long)
    mask = torch.zeros(len(batch), max_len)
    for row, (seq, start) in enumerate(batch):
        ids[row, :len(seq)] = torch.tensor(seq)
        mask[row, start:len(seq)] = 1.0
    logits = model(ids)
    logps = torch.log_softmax(logits.float(), dim=-1)
    # token t is predicted from position t-1
    target_lp = logps[:, :-1].gather(
        2, ids[:, 1:, None]).squeeze(-1)
    nll = -(target_lp * mask[:, 1:]).sum(dim=1)
    return nll.mean()


def train_adapter(data_dir: str | Path, out_dir: str | Path,
                  seed: int = 0, **overrides) -> AdapterRun:
    """Train adapter weights on a dataset directory and checkpoint them.

    Hyperparameters default to the training-config sidecar; keyword
    overrides win. With epochs=0 the checkpoint is the untouched
    initialization and the loss log stays empty.
    """
    instances, manifest, config = load_dataset(data_dir)
    hyper = dict(config)
    unknown = set(overrides) - set(hyper)
    if unknown:
        raise ValueError(f"unknown hyperparameter overrides: {sorted(unknown)}")
    hyper.update(overrides)

    torch.manual_seed(seed)
    tokenizer = build_tokenizer(instances)
    model_cfg = ModelConfig(vocab_size=len(tokenizer),
                            rank=hyper["rank"], alpha=hyper["alpha"])
    model = TinyCausalLM(model_cfg)

    encoded = []
    for inst in instances:
        enc, start = tokenizer.encode_pair(inst["prompt"], inst["completion"])
        encoded.append((list(enc.ids), start))

    run = AdapterRun(hyperparams=hyper, manifest=manifest)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=hyper["lr"])
    rng = random.Random(seed)
    batch_size = hyper["batch_size"]

    model.train()
    for _ in range(hyper["epochs"]):
        order = list(range(len(encoded)))
        rng.shuffle(order)  # 1:1 task interleave via joint shuffle
        epoch_total = 0.0
        for i in range(0, len(order), batch_size):
            batch = [encoded[j] for j in order[i:i + batch_size]]
            loss = _batch_loss(model, batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_loss = float(loss.detach())
            run.step_losses.append(step_loss)
            epoch_total += step_loss * len(batch)
        run.epoch_losses.append(epoch_total / len(order))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "adapter.pt"
    torch.save({
        "model_state": model.state_dict(),
        "model_config": model_cfg.to_dict(),
        "vocab": tokenizer.words[1:],  # <unk> is implicit
        "hyperparams": hyper,
        "manifest_fingerprint": manifest["source_fingerprint"],
        "step_losses": run.step_losses,
        "epoch_losses": run.epoch_losses,
    }, checkpoint)
    run.checkpoint_path = checkpoint
    return run


def load_checkpoint(path: str | Path) -> tuple[TinyCausalLM, Tokenizer, dict]:
    payload = torch.load(path, weights_only=True)
    tokenizer = Tokenizer(payload["vocab"])
    model = TinyCausalLM(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, tokenizer, payload
