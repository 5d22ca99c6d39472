# Joint state indexing
