"""Listen-attend-spell speech recognition with external language-model integration.

Modules: ``autograd`` and ``params`` (differentiable ops, Adam, checkpoints),
``tokenizer`` (BPE wordpieces), ``corpus`` (synthetic paired/unpaired data),
``las`` (encoder/attention/decoder), ``lm`` (recurrent LM), ``fusion``
(integration strategies), ``decoding`` (greedy and beam search),
``evaluation`` (WER, oracle WER, rescoring), ``training``, ``experiment``
and ``cli``.
"""

__version__ = "0.1.0"
