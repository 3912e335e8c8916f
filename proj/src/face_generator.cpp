namespace emoface {}
