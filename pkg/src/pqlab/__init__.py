"""Post-training quantization backdoor laboratory."""
