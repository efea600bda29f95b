// Single-page client: submit an edit, watch stage progress, inspect and
// override the captions, then steer the edit-direction weight and compare
// the results side by side. At most one job polls at a time; gallery
// updates are serialized through this state object.

import {
  ApiClient,
  ApiError,
  JobView,
  ServiceConfig,
  STAGE_ORDER,
} from "./api";

export interface GalleryEntry {
  weight: number;
  imageUrl: string;
  jobId: string;
}

export interface AppHandle {
  submit(): Promise<JobView | null>;
  steer(weight: number): Promise<JobView | null>;
  readonly gallery: GalleryEntry[];
  readonly baseJobId: string | null;
  readonly config: ServiceConfig;
}

interface AppOptions {
  pollIntervalMs?: number;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text) node.textContent = text;
  return node;
}

export async function createApp(
  root: HTMLElement,
  client: ApiClient,
  options: AppOptions = {},
): Promise<AppHandle> {
  const pollIntervalMs = options.pollIntervalMs ?? 500;
  // Slider bounds and defaults always come from the service, never hardcoded.
  const config = await client.getConfig();

  root.innerHTML = "";
  root.append(
    el("h1", {}, "capedit"),
    el("p", { class: "tagline" },
      `instruction-guided image editing (profile: ${config.profile})`),
  );

  // -- submission form -------------------------------------------------------
  const form = el("form", { id: "edit-form" });
  const imageInput = el("input", { type: "file", id: "image-input",
                                   accept: "image/*" });
  const preview = el("img", { id: "input-preview", alt: "input preview" });
  const instructionInput = el("input", {
    type: "text", id: "instruction",
    placeholder: "e.g. make the teddy bear black",
  });
  const instructionError = el("span", { id: "instruction-error",
                                        class: "field-error" });
  const imageError = el("span", { id: "image-error", class: "field-error" });
  const beforeOverride = el("input", { type: "text", id: "before-caption",
                                       placeholder: "override before-edit caption" });
  const afterOverride = el("input", { type: "text", id: "after-caption",
                                      placeholder: "override after-edit caption" });
  const submitButton = el("button", { type: "submit", id: "submit-btn" }, "Edit");
  form.append(
    el("label", {}, "image"), imageInput, imageError, preview,
    el("label", {}, "instruction"), instructionInput, instructionError,
    el("label", {}, "captions (optional overrides)"),
    beforeOverride, afterOverride,
    submitButton,
  );

  // -- progress --------------------------------------------------------------
  const progress = el("section", { id: "progress" });
  const stageChips = new Map<string, HTMLElement>();
  for (const stage of STAGE_ORDER) {
    const chip = el("span", { class: "stage", "data-stage": stage }, stage);
    stageChips.set(stage, chip);
    progress.append(chip);
  }
  const statusText = el("p", { id: "status-text" });
  progress.append(statusText);

  // -- captions from the completed job (editable for resubmission) -----------
  const captionsSection = el("section", { id: "captions" });
  const captionBefore = el("input", { type: "text", id: "caption-before-view" });
  const captionAfter = el("input", { type: "text", id: "caption-after-view" });
  captionsSection.append(
    el("label", {}, "before-edit caption"), captionBefore,
    el("label", {}, "after-edit caption"), captionAfter,
  );

  // -- weight steering --------------------------------------------------------
  const steerSection = el("section", { id: "steer" });
  const slider = el("input", {
    type: "range", id: "weight-slider",
    min: String(config.weight_min), max: String(config.weight_max),
    step: "0.05", value: "1",
  });
  const weightValue = el("output", { id: "weight-value" }, "1.00");
  const steerButton = el("button", { type: "button", id: "steer-btn", disabled: "" },
                         "Generate at this weight");
  slider.addEventListener("input", () => {
    weightValue.textContent = Number(slider.value).toFixed(2);
  });
  steerSection.append(
    el("label", {},
       `edit-direction weight (grid ${config.weight_grid.join(" / ")})`),
    slider, weightValue, steerButton,
  );

  // -- gallery ----------------------------------------------------------------
  const gallerySection = el("section", { id: "gallery" });

  const state = {
    baseJobId: null as string | null,
    gallery: [] as GalleryEntry[],
    polling: false,
  };

  function setStatus(message: string, isError = false) {
    statusText.textContent = message;
    statusText.classList.toggle("error", isError);
  }

  function renderStages(view: JobView) {
    const reached = STAGE_ORDER.indexOf(view.status);
    for (const [stage, chip] of stageChips) {
      const index = STAGE_ORDER.indexOf(stage as JobView["status"]);
      chip.classList.toggle("active", stage === view.status);
      chip.classList.toggle("completed", index < reached);
      chip.classList.toggle("skipped",
        (view.skipped_stages ?? []).includes(stage));
    }
  }

  function renderCaptions(view: JobView) {
    if (!view.captions) return;
    captionBefore.value = view.captions.before[0] ?? "";
    captionAfter.value = view.captions.after[0] ?? "";
  }

  function addGalleryEntry(view: JobView) {
    if (!view.result) return;
    const weight = view.result.weight;
    if (state.gallery.some((entry) => entry.weight === weight)) return;
    const entry: GalleryEntry = {
      weight,
      imageUrl: client.imageUrl(view.result),
      jobId: view.job_id,
    };
    state.gallery.push(entry);
    state.gallery.sort((a, b) => a.weight - b.weight);

    const figure = el("figure", { "data-weight": String(weight) });
    const img = el("img", { src: entry.imageUrl, alt: `result at w=${weight}` });
    figure.append(img, el("figcaption", {}, `w=${weight.toFixed(2)}`));
    const panes = [...gallerySection.querySelectorAll("figure")];
    const next = panes.find(
      (pane) => Number(pane.getAttribute("data-weight")) > weight);
    gallerySection.insertBefore(figure, next ?? null);
  }

  async function trackJob(jobId: string): Promise<JobView> {
    state.polling = true;
    try {
      return await client.pollJob(jobId, (view) => {
        renderStages(view);
        renderCaptions(view);
        setStatus(`job ${view.job_id}: ${view.status}`);
      }, pollIntervalMs);
    } finally {
      state.polling = false;
    }
  }

  async function submit(): Promise<JobView | null> {
    instructionError.textContent = "";
    imageError.textContent = "";
    const instruction = instructionInput.value.trim();
    const file = imageInput.files?.[0] ?? null;
    // client-side validation mirrors the server's rules; no network call
    let invalid = false;
    if (!instruction) {
      instructionError.textContent = "instruction must be non-empty";
      invalid = true;
    }
    if (!file) {
      imageError.textContent = "select an image";
      invalid = true;
    }
    if (invalid || !file) return null;

    submitButton.setAttribute("disabled", "");
    try {
      const overrides: Record<string, unknown> = {};
      if (beforeOverride.value.trim()) {
        overrides["before_caption_override"] = beforeOverride.value.trim();
      }
      if (afterOverride.value.trim()) {
        overrides["after_caption_override"] = afterOverride.value.trim();
      }
      const accepted = await client.submitEdit(file, instruction, overrides);
      setStatus(`job ${accepted.job_id}: submitted`);
      const view = await trackJob(accepted.job_id);
      state.baseJobId = view.job_id;
      steerButton.removeAttribute("disabled");
      addGalleryEntry(view);
      setStatus(`job ${view.job_id}: done`);
      return view;
    } catch (error) {
      if (error instanceof ApiError && error.field === "instruction") {
        instructionError.textContent = error.message;
      } else if (error instanceof ApiError && error.field === "image") {
        imageError.textContent = error.message;
      } else {
        setStatus(String(error instanceof Error ? error.message : error), true);
      }
      return null;
    } finally {
      submitButton.removeAttribute("disabled");
    }
  }

  async function steer(weight: number): Promise<JobView | null> {
    if (!state.baseJobId) {
      setStatus("run an edit first", true);
      return null;
    }
    if (state.gallery.some((entry) => entry.weight === weight)) {
      setStatus(`w=${weight.toFixed(2)} already in the gallery (cached)`);
      return null;
    }
    steerButton.setAttribute("disabled", "");
    try {
      const accepted = await client.rerun(state.baseJobId, weight);
      const view = await trackJob(accepted.job_id);
      addGalleryEntry(view);
      setStatus(`job ${view.job_id}: done`);
      return view;
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        setStatus("cached inversion is gone; submit a full edit again", true);
      } else {
        setStatus(String(error instanceof Error ? error.message : error), true);
      }
      return null;
    } finally {
      steerButton.removeAttribute("disabled");
    }
  }

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void submit();
  });
  steerButton.addEventListener("click", () => {
    void steer(Number(slider.value));
  });
  imageInput.addEventListener("change", () => {
    const file = imageInput.files?.[0];
    if (file && typeof URL.createObjectURL === "function") {
      preview.src = URL.createObjectURL(file);
    }
  });

  root.append(form, progress, captionsSection, steerSection, gallerySection);

  return {
    submit,
    steer,
    get gallery() {
      return state.gallery;
    },
    get baseJobId() {
      return state.baseJobId;
    },
    config,
  };
}
