from fedimpute import numcore as nc

# training-scale tests allocate MB-sized temporaries every step; keep them
# on the heap instead of round-tripping through mmap
nc.enable_malloc_reuse()
