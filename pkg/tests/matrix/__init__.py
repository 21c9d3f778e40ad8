# Combinatorial matrix tests for editing configurations
