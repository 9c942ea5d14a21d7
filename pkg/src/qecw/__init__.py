"""Surface-code decoding workbench: circuit sampling, MWPM, neural decoders, compression and FPGA estimates."""

__version__ = "0.1.0"
