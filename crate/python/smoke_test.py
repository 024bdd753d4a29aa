"""Smoke test for the pcolab_py extension module."""

import json
import math

import pcolab_py as pc


def main():
    cfg = pc.Config()
    assert len(cfg.hash()) == 64
    assert pc.Config(cfg.to_json()).hash() == cfg.hash()

    vocab, items = pc.generate_corpus(cfg, 0, 5)
    assert len(items) == 5
    prompt, response = items[0]
    print("vocab", len(vocab), "example", " ".join(vocab[t] for t in prompt + response))

    model = pc.TinyLm(cfg.lm_json(), 0)
    lp = model.logprob(prompt, response)
    assert lp < 0.0 and math.isfinite(lp)
    gen = model.generate(prompt, 8)
    assert 1 <= len(gen) <= 8

    assert pc.gate(3.0, 3.0, 0.5) == 0.5
    loser = response[:-2] + response[-2:-1] * 2
    pairs = [(prompt, response, loser)]
    loss = json.loads(cfg.loss_json())
    for variant in ["binary_cringe", "pairwise_cringe", "hard_margin_cringe", "dpo"]:
        loss["variant"] = variant
        value, grad_norm = pc.pair_loss(model, pairs, json.dumps(loss))
        assert value >= 0.0 and math.isfinite(grad_norm), variant
        print(f"{variant:20s} loss={value:.4f} |grad|={grad_norm:.4f}")

    assert pc.repeat_at_n([1, 2, 3], [1, 2, 3, 4], 3) >= 1
    assert pc.unigram_f1([4, 5], [4, 5]) == 1.0

    report = pc.oracle_suite(0)
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert report["passed"], failed
    print("oracle suite:", len(report["checks"]), "checks passed")


if __name__ == "__main__":
    main()
