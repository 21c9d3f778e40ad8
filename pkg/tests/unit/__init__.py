# Unit tests for lib/ modules
