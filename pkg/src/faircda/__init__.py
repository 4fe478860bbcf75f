"""Fair-CDA style training toolkit: disentangle, augment, fine-tune, audit."""

__version__ = "0.1.0"
