"""Dense tensor engine, layers, recurrent cells, losses and the optimizer."""
