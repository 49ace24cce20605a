"""How conversations become token sequences with an assistant-only loss mask.

Run: python3 demos/02_chat_template.py
"""

from microvlm import tokenizer as tok

conv = [
    tok.Turn("user", "What is the imaging modality?"),
    tok.Turn("assistant", "The imaging modality is xray."),
    tok.Turn("user", "Is there a mass?"),
    tok.Turn("assistant", "yes"),
]

seq = tok.render_conversation(conv, include_image=True)

NAMES = {tok.BOS: "<bos>", tok.EOS: "<eos>", tok.IMAGE: "<image>",
         tok.ROLE_USER: "<user>", tok.ROLE_ASSISTANT: "<assistant>", tok.PAD: "<pad>"}

print(f"{len(seq.ids)} tokens, image slot at index {seq.image_slot}")
print(f"{sum(seq.loss_mask)} positions contribute to the loss\n")

line_tok, line_mask = [], []
for t, m in zip(seq.ids, seq.loss_mask):
    shown = NAMES.get(t, chr(t) if 32 <= t < 127 else f"\\x{t:02x}")
    line_tok.append(shown)
    line_mask.append("^" * len(shown) if m else " " * len(shown))
print("".join(line_tok))
print("".join(line_mask), "   (^ = loss positions)")

print("\nA generation prompt ends with the assistant marker instead:")
prompt = tok.render_conversation([tok.Turn("user", "Is there a mass?")],
                                 include_image=True, add_generation_prompt=True)
print("".join(NAMES.get(t, chr(t) if 32 <= t < 127 else "?") for t in prompt.ids))

print("\nByte round trips are lossless:", tok.decode(tok.encode("grüße ✓")) == "grüße ✓")
