# RazorLab Test Suite
