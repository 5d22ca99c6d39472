# Trace and chain file I/O
