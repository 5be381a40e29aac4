# /src/app/models/__init__.py
# Numeric model pieces: autodiff tensors, the AdamW optimizer, the voting
# quantizer and the frame tokenizer built on top of it.
