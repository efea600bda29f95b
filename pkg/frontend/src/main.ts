import "./styles.css";
import { ApiClient } from "./api";
import { createApp } from "./app";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

// Same-origin by default; override for a dev server on another port.
const base = import.meta.env.VITE_CAPEDIT_API ?? "";
void createApp(root, new ApiClient(base)).catch((error) => {
  root.textContent = `failed to reach the edit service: ${error}`;
});
