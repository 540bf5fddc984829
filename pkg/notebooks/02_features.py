# %% [markdown]
# # From a WAV clip to segment images
#
# Power STFT (periodic Hann, n_fft 2048, hop 1024), an HTK-mel triangular
# filterbank, log compression, then fixed-width windows.  A stereo clip gives
# one image per channel variant for every window.

# %%
import numpy as np

from soundmtl.features import AudioClip, FeatureOptions, clip_images, n_segments, n_stft_frames, stft_power

sr = 44100
t = np.arange(int(1.5 * sr)) / sr
left = np.sin(2 * np.pi * 440 * t)
right = 0.5 * np.sin(2 * np.pi * 3000 * t)
clip = AudioClip(sr, np.stack([left, right]))

# %%
power = stft_power(left)
k = int(np.argmax(power[0]))
print("frames", power.shape[0], "== formula", n_stft_frames(len(left)))
print("peak bin", k, "->", k * sr / 2048, "Hz")
print("energy within +-2 bins", power[0, k - 2:k + 3].sum() / power[0].sum())

# %% [markdown]
# Desk scale: 32 bands and 32-frame windows with hop 8.  Full scale is
# 128 x 128 with hop 32.

# %%
opts = FeatureOptions.desk_scale("quadruple")
images = clip_images(clip, "demo", opts)
print(len(images), "images:", sorted({im.variant for im in images}))
print("windows per variant", n_segments(n_stft_frames(len(left)), 32, 8))
diff = next(im for im in images if im.variant == "diff")
print("diff image shape", diff.values.shape, "range", diff.values.min(), diff.values.max())
