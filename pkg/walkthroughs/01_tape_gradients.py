"""
Reverse-mode gradients on the tape
==================================

Build a small softmax-attention readout by hand, differentiate it with one
backward sweep, and compare against central finite differences.
"""

import numpy as np

from visuopool import tape as T
from visuopool.gradcheck import numerical_grad, relative_error

rng = np.random.default_rng(0)
keys = rng.normal(size=(6, 4))    # six tokens, four channels
query = rng.normal(size=(4, 1))


def readout(q):
    tape = T.Tape()
    qn = tape.leaf(q)
    k = tape.constant(keys)
    # attention over tokens, then a weighted sum of the first channel
    weights = T.softmax_rows(T.transpose(T.matmul(k, qn)))       # (1, 6)
    value = T.sum_all(T.matmul(weights, tape.constant(keys[:, :1])))
    return tape, qn, value


tape, qn, value = readout(query)
tape.backward(value)
print("readout", value.value.item())
print("tape records", len(tape.nodes), "nodes")

# the same derivative, one coordinate at a time
numeric = numerical_grad(lambda: readout(query)[2].value.item(), query)
print("analytic", qn.grad.ravel())
print("numeric ", numeric.ravel())
print("max relative error %.2e" % relative_error(qn.grad, numeric))
