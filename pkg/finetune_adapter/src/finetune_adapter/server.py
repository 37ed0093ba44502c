"""Completion-protocol scoring server over a trained adapter checkpoint.

POST {base}/v1/completions with echo=true and max_tokens=0 returns the
prompt's tokens, per-token logprobs (null for the first token, which has
no prefix), and character offsets; without echo it generates greedily,
which is deterministic at temperature 0.
"""

from __future__ import annotations

import threading
from typing import Optional

from fastapi import FastAPI
from pydantic import BaseModel

from .model import TinyCausalLM
from .tokenizer import Tokenizer
from .train import load_checkpoint


class CompletionRequest(BaseModel):
    prompt: str
    model: Optional[str] = None
    max_tokens: int = 16
    temperature: float = 0.0
    echo: bool = False
    logprobs: Optional[int] = None
    stop: Optional[list[str]] = None


def create_app(checkpoint_path: str) -> FastAPI:
    model, tokenizer, payload = load_checkpoint(checkpoint_path)
    app = FastAPI()
    lock = threading.Lock()

    def score(prompt: str) -> dict:
        enc = tokenizer.encode(prompt)
        with lock:
            logps = model.token_logprobs(list(enc.ids))
        return {
            "text": prompt,
            "logprobs": {
                "tokens": list(enc.pieces),
                "token_logprobs": [None] + logps[1:],
                "text_offset": list(enc.offsets),
            },
        }

    def generate(req: CompletionRequest) -> dict:
        enc = tokenizer.encode(req.prompt)
        ids = list(enc.ids)
        words = []
        finish = "length"
        with lock:
            for _ in range(req.max_tokens):
                if len(ids) >= model.cfg.max_len:
                    break
                nxt = model.greedy_next(ids)
                ids.append(nxt)
                words.append(tokenizer.words[nxt])
        text = " ".join(words)
        for stop in req.stop or ():
            if stop in text:
                text = text[:text.index(stop)]
                finish = "stop"
        return {"text": text, "finish_reason": finish}

    @app.post("/v1/completions")
    def completions(req: CompletionRequest) -> dict:
        if req.echo and req.max_tokens == 0:
            choice = score(req.prompt)
        else:
            choice = generate(req)
        return {"choices": [choice],
                "model": payload["manifest_fingerprint"]}

    return app


def serve(checkpoint_path: str, host: str = "127.0.0.1",
          port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(checkpoint_path), host=host, port=port,
                log_level="warning")
