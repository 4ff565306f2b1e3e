"""printkind: classify the printing technology of 19th-century book
illustrations (wood engraving vs lithography) from 128x128 full-resolution
crops, with a built-in synthetic corpus so the whole pipeline is
verifiable without the original scans."""

__version__ = "0.1.0"
