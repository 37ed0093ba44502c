import threading
import time

import pytest


def build_corpus(n_relations, pairs_per_relation):
    """Synthetic training corpus with unique entity pairs, built through
    the upstream toolkit's public API."""
    from rexkit.corpus import Corpus, Example, Mention

    schema = [f"rel_{r}" for r in range(n_relations)]
    train = []
    for r, rel in enumerate(schema):
        for i in range(pairs_per_relation):
            train.append(Example(
                id=f"train_{r}_{i}",
                tokens=(f"s{r}{i}", f"H{r}_{i}", f"T{r}_{i}"),
                head=Mention(text=f"H{r}_{i}"),
                tail=Mention(text=f"T{r}_{i}"),
                relation=rel,
            ))
    return Corpus(schema=schema, na_label="NA", splits={"train": train})


def emit_dataset(out_dir, n_relations, pairs_per_relation, seed=0,
                 p_noise=0.5):
    """Write a tuning dataset directory with the upstream emitter and
    return (corpus, manifest)."""
    from rexkit.pair_index import build_index
    from rexkit.tuning import NoiseConfig, write_tuning_dataset

    corpus = build_corpus(n_relations, pairs_per_relation)
    index = build_index(corpus, "train")
    manifest = write_tuning_dataset(corpus, index, out_dir, k=5, seed=seed,
                                    noise=NoiseConfig(p_noise=p_noise))
    return corpus, manifest


@pytest.fixture
def small_dataset(tmp_path):
    data_dir = tmp_path / "data"
    corpus, manifest = emit_dataset(data_dir, n_relations=4,
                                    pairs_per_relation=3)
    return {"dir": data_dir, "corpus": corpus, "manifest": manifest}


def serve_checkpoint(checkpoint_path):
    """Run the scoring server on an ephemeral port; returns (base_url,
    shutdown callable)."""
    import uvicorn

    from finetune_adapter.server import create_app

    config = uvicorn.Config(create_app(str(checkpoint_path)),
                            host="127.0.0.1", port=0, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("scoring server did not start")
        time.sleep(0.02)
    port = server.servers[0].sockets[0].getsockname()[1]

    def shutdown():
        server.should_exit = True
        thread.join(timeout=5)

    return f"http://127.0.0.1:{port}", shutdown
