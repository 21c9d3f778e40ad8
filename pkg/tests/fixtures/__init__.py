# Test fixtures for RazorLab
