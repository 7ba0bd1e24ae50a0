"""Two-level cascaded CNN pipeline for hand box and fingertip regression."""
