"""Word-vector tables and per-scene feature assembly."""
