# Integration tests for razorlab subcommands
