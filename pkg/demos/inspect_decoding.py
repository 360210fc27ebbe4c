"""Walk through decoding one sentence with a trained checkpoint.

Prints the beam hypotheses with their confidences, then replays the best one
step by step, showing where attention looks and how much of each token's
probability came from copying a source word.

    python3 demos/inspect_decoding.py desk_run/model/epoch_030.noie "the governor works for Zorbex Labs ."
"""

import sys

import numpy as np

from neural_oie.inference import BeamConfig, beam_search, confidence
from neural_oie.model import attend, decode_step, start
from neural_oie.text import BOS_ID, EOS_ID, tokenize
from neural_oie.training import load_checkpoint


def main(model_path: str, sentence: str) -> None:
    ck = load_checkpoint(model_path)
    tokens = tokenize(sentence)
    src, oov = ck.vocab.encode_source(tokens)
    print("source:", " ".join(f"{t}{'*' if i >= len(ck.vocab) else ''}" for t, i in zip(tokens, src)))
    print("(* = out of vocabulary, reachable only by copying)\n")

    hyps = beam_search(src, ck.params, BeamConfig(beam_width=5, top_k=5))
    for h in hyps:
        print(f"{confidence(h):.3f}  {' '.join(ck.vocab.decode(h.ids, oov))}")

    best = hyps[0]
    print("\nstep  token            p      copied  attends to")
    enc, state = start(src, ck.params)
    prev = BOS_ID
    for step, w in enumerate(best.ids, 1):
        alpha = attend(state.top, enc, ck.params).weights[0]
        state, dist = decode_step(prev, state, enc, ck.params)
        p = dist.probs[0, w]
        # copy mass for w: attention on source positions holding w, over the normaliser
        copy = alpha[np.asarray(src) == w].sum() if w >= len(ck.vocab) else 0.0
        z = 1.0 + alpha[np.asarray(src) >= len(ck.vocab)].sum()
        focus = tokens[int(np.argmax(alpha))]
        print(f"{step:>4}  {ck.vocab.decode([w], oov)[0]:<15} {p:.3f}  {copy / z:.3f}   {focus}")
        prev = w
        if w == EOS_ID:
            break


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
