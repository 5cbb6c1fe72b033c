"""Out-of-core shuffling strategies, page-level I/O accounting and a convergence harness."""

__version__ = "0.1.0"
