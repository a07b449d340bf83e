"""Freeze the toy encoder's embedding output for one fixture sentence.

Regenerate only on an intentional change to the embedding path.
"""
import os

import numpy as np

from tokprobe.encoder import Encoder
from tokprobe.tokenizer import encode
from tokprobe.toy import random_weights, toy_config, toy_vocabulary

HERE = os.path.dirname(os.path.abspath(__file__))
SENTENCE = "the glass broke and i cut myself ."


def main():
    vocab = toy_vocabulary()
    config = toy_config(vocab)
    enc = Encoder(config, random_weights(config, 0))
    sent = encode(SENTENCE, vocab, max_len=16)
    np.save(os.path.join(HERE, "golden_embedding.npy"), enc.embed(sent).astype("<f4"))


if __name__ == "__main__":
    main()
