"""Paper-scale predictor bridge.

Finetunes a pretrained masked language model with a linear head that emits
two unconstrained distribution parameters per word, then serves predictions
over the ctxmi-predict line protocol so the estimation toolkit can swap its
built-in window model for a full transformer.
"""

__version__ = "0.1.0"
