"""Save and load trained models: checkpoint plus manifest plus vocabulary.

A run directory holds everything needed to rebuild the model and reproduce
the run: config.cfg, vocab.txt, checkpoint.bin, manifest.json, and the
synonym selection report for attention models.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import __version__
from ..attention import BaselineClassifier, ChunkClassifier, MsamParams
from ..diffcore import Tensor
from ..quant import Refiner
from ..synsel import CodeEmbedding, CodeEmbeddings
from ..textenc import EncoderParams, Vocabulary
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, load_config


def collect_tensors(model, refiner: Refiner | None = None) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in model.trainable().items()}
    if isinstance(model, ChunkClassifier):
        tensors["code.q_stack"] = model.code_embeddings.q_stack.reshape(
            model.code_embeddings.num_codes, -1)
        tensors["code.v_matrix"] = model.code_embeddings.v_matrix
    if refiner is not None:
        tensors.update({name: p.data for name, p in refiner.trainable().items()})
    return tensors


def save_model(out_dir, model, config: Config, *, refiner: Refiner | None = None,
               history: dict | None = None, metrics: dict | None = None,
               selection_report: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = "ce-msam" if isinstance(model, ChunkClassifier) else "bm"
    config.save(out / "config.cfg")
    model.vocab.save(out / "vocab.txt")
    save_checkpoint(out / "checkpoint.bin", collect_tensors(model, refiner),
                    config_hash=config.hash(), metrics=metrics or {})
    manifest = {
        "version": __version__,
        "model": kind,
        "seed": config.seed,
        "config_hash": config.hash(),
        "config": config.as_dict(),
        "codes": (model.code_embeddings.codes
                  if isinstance(model, ChunkClassifier) else
                  [f"c{i:03d}" for i in range(model.num_codes)]),
        "has_refiner": refiner is not None,
        "history": history or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True) + "\n",
                                       encoding="utf-8")
    if selection_report is not None:
        (out / "selection.json").write_text(json.dumps(selection_report, indent=2,
                                                       sort_keys=True) + "\n",
                                            encoding="utf-8")


def _encoder_from_arrays(named: dict[str, np.ndarray], heads: int,
                         max_len: int) -> EncoderParams:
    tok = named["enc.tok_emb"]
    blocks = {int(key.split(".")[1][5:]) for key in named
              if key.startswith("enc.block")}
    params = EncoderParams.init(vocab_size=tok.shape[0], hidden=tok.shape[1],
                                heads=heads, max_len=max_len,
                                num_blocks=max(blocks) + 1, seed=0)
    for name, tensor in params.named().items():
        if name not in named:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if named[name].shape != tensor.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {named[name].shape}, "
                                  f"expected {tensor.data.shape}")
        tensor.data = named[name]
    return params


def load_model(model_dir):
    """Rebuild (model, refiner or None, config, manifest) from a run directory."""
    run = Path(model_dir)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    config = load_config(run / "config.cfg")
    vocab = Vocabulary.load(run / "vocab.txt")
    ckpt = load_checkpoint(run / "checkpoint.bin")
    named = ckpt.tensors
    if ckpt.config_hash and ckpt.config_hash != config.hash():
        raise CheckpointError(f"{run}: checkpoint was written under a different "
                              "configuration")
    encoder = _encoder_from_arrays(named, heads=config.heads,
                                   max_len=config.chunk_len)

    if manifest["model"] == "ce-msam":
        codes = manifest["codes"]
        q_stack = named["code.q_stack"].reshape(len(codes), config.synonyms,
                                                config.hidden)
        v_matrix = named["code.v_matrix"]
        entries = [CodeEmbedding(code=c, q=q_stack[i], v=v_matrix[i],
                                 selected=(), objective=float("nan"),
                                 mode="loaded")
                   for i, c in enumerate(codes)]
        msam = MsamParams(
            w_q=Tensor(named["msam.w_q"], requires_grad=True),
            w_k=Tensor(named["msam.w_k"], requires_grad=True),
            w=Tensor(named["msam.w"], requires_grad=True),
            heads=config.heads)
        model = ChunkClassifier(vocab, encoder, msam, CodeEmbeddings(entries),
                                config.chunk_len, config.overlap)
    elif manifest["model"] == "bm":
        model = BaselineClassifier(
            vocab, encoder,
            weight=Tensor(named["bm.weight"], requires_grad=True),
            bias=Tensor(named["bm.bias"], requires_grad=True),
            chunk_len=config.chunk_len)
    else:
        raise CheckpointError(f"unknown model kind {manifest['model']!r}")

    refiner = None
    if manifest.get("has_refiner"):
        refiner = Refiner(
            w1=Tensor(named["refiner.w1"], requires_grad=True),
            b1=Tensor(named["refiner.b1"], requires_grad=True),
            w2=Tensor(named["refiner.w2"], requires_grad=True),
            b2=Tensor(named["refiner.b2"], requires_grad=True))
    return model, refiner, config, manifest
